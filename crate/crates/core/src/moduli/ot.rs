//! Exact discrete 1-Wasserstein distance by the transportation simplex.
//!
//! Start from the northwest-corner basis, price with MODI potentials, pivot
//! along the unique cycle in the spanning-tree basis. Degenerate bases carry
//! explicit zero-flow arcs. Dantzig pricing switches to Bland's rule after a
//! long run of degenerate pivots.

use serde::{Deserialize, Serialize};

use super::{DiscreteMeasure, ModuliError};
use crate::rng::RandomStream;

pub const EXACT_CAP: usize = 1_000_000;
pub const SUBSAMPLE_ATOMS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub m: usize,
    pub n: usize,
    /// Sparse `(source, target, flow)` triplets with positive flow.
    pub flows: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.m];
        for &(i, _, f) in &self.flows {
            s[i] += f;
        }
        s
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for &(_, j, f) in &self.flows {
            s[j] += f;
        }
        s
    }
}

/// Mean-l1 ground metric on the unit cube.
#[inline]
pub fn ground(x: &[f64], y: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    s / x.len().max(1) as f64
}

/// Exact W1 and an optimal plan. Errors above `m n > 1e6`.
pub fn w1(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<(f64, TransportPlan), ModuliError> {
    if mu.dim() != nu.dim() {
        return Err(ModuliError::Dimension(mu.dim(), nu.dim()));
    }
    let (m, n) = (mu.len(), nu.len());
    if m.saturating_mul(n) > EXACT_CAP {
        return Err(ModuliError::TooLarge(m, n));
    }
    if mu == nu {
        let flows = (0..m).map(|i| (i, i, mu.weights()[i])).collect();
        return Ok((0.0, TransportPlan { m, n, flows, cost: 0.0 }));
    }
    // Zero-weight atoms carry no mass; drop them before solving. Ordering
    // both sides by coordinate sum makes the northwest-corner start the
    // monotone coupling, which is optimal in one dimension.
    let key = |a: &[f64]| a.iter().sum::<f64>();
    let mut rows: Vec<usize> = (0..m).filter(|&i| mu.weights()[i] > 0.0).collect();
    let mut cols: Vec<usize> = (0..n).filter(|&j| nu.weights()[j] > 0.0).collect();
    rows.sort_by(|&a, &b| key(mu.atom(a)).total_cmp(&key(mu.atom(b))).then(a.cmp(&b)));
    cols.sort_by(|&a, &b| key(nu.atom(a)).total_cmp(&key(nu.atom(b))).then(a.cmp(&b)));
    let supply: Vec<f64> = rows.iter().map(|&i| mu.weights()[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| nu.weights()[j]).collect();
    let cost: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
        .map(|(i, j)| ground(mu.atom(i), nu.atom(j)))
        .collect();
    let basis = solve(&supply, &demand, &cost);
    let nc = cols.len();
    let mut flows = Vec::new();
    let mut total = 0.0;
    for (i, j, f) in basis {
        if f > 0.0 {
            total += f * cost[i * nc + j];
            flows.push((rows[i], cols[j], f));
        }
    }
    flows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    Ok((total, TransportPlan { m, n, flows, cost: total }))
}

/// W1 with deterministic stratified subsampling above the exact cap.
/// Returns `(distance, plan, subsampled)`.
pub fn w1_auto(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    stream: RandomStream,
) -> Result<(f64, TransportPlan, bool), ModuliError> {
    if mu.len().saturating_mul(nu.len()) <= EXACT_CAP {
        let (d, p) = w1(mu, nu)?;
        return Ok((d, p, false));
    }
    let a = if mu.len() > SUBSAMPLE_ATOMS { subsample(mu, SUBSAMPLE_ATOMS, stream, 0) } else { mu.clone() };
    let b = if nu.len() > SUBSAMPLE_ATOMS { subsample(nu, SUBSAMPLE_ATOMS, stream, 1) } else { nu.clone() };
    let (d, p) = w1(&a, &b)?;
    Ok((d, p, true))
}

/// Systematic sampling of `k` atoms along the cumulative weights with one
/// keyed offset; duplicates merge.
pub fn subsample(mu: &DiscreteMeasure, k: usize, stream: RandomStream, side: u64) -> DiscreteMeasure {
    let offset = stream.purpose("ot-subsample").uniform(side, 0);
    let mut atoms = Vec::with_capacity(k);
    let mut cum = 0.0;
    let mut i = 0;
    for s in 0..k {
        let target = (s as f64 + offset) / k as f64;
        while i + 1 < mu.len() && cum + mu.weights()[i] <= target {
            cum += mu.weights()[i];
            i += 1;
        }
        atoms.push(mu.atom(i).to_vec());
    }
    DiscreteMeasure::new(mu.dim(), atoms, vec![1.0 / k as f64; k]).expect("subsample is a valid measure")
}

struct Tree {
    m: usize,
    cells: Vec<(usize, usize, f64)>,
    adj: Vec<Vec<usize>>,
}

impl Tree {
    fn col(&self, j: usize) -> usize {
        self.m + j
    }

    fn other(&self, cell: usize, node: usize) -> usize {
        let (i, j, _) = self.cells[cell];
        if node == i {
            self.m + j
        } else {
            i
        }
    }

    fn push(&mut self, i: usize, j: usize, f: f64) {
        let id = self.cells.len();
        self.cells.push((i, j, f));
        self.adj[i].push(id);
        let c = self.col(j);
        self.adj[c].push(id);
    }

    fn replace(&mut self, id: usize, i: usize, j: usize, f: f64) {
        let (oi, oj, _) = self.cells[id];
        let oc = self.col(oj);
        self.adj[oi].retain(|&c| c != id);
        self.adj[oc].retain(|&c| c != id);
        self.cells[id] = (i, j, f);
        self.adj[i].push(id);
        let c = self.col(j);
        self.adj[c].push(id);
    }
}

/// Solve the balanced transportation problem; returns basic cells.
fn solve(supply: &[f64], demand: &[f64], cost: &[f64]) -> Vec<(usize, usize, f64)> {
    let (m, n) = (supply.len(), demand.len());
    let nodes = m + n;
    let mut tree = Tree { m, cells: Vec::with_capacity(nodes - 1), adj: vec![Vec::new(); nodes] };

    // Northwest corner; exactly m + n - 1 cells, zero flows kept as basic.
    let (mut s, mut d) = (supply.to_vec(), demand.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let f = s[i].min(d[j]).max(0.0);
        tree.push(i, j, f);
        s[i] -= f;
        d[j] -= f;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || s[i] < d[j] {
            i += 1;
        } else {
            j += 1;
        }
    }

    let scale = cost.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let mut pot = vec![0.0; nodes];
    let mut parent = vec![usize::MAX; nodes];
    let mut depth = vec![0usize; nodes];
    let mut stack = Vec::with_capacity(nodes);
    let mut degenerate_run = 0usize;
    let bland_after = 4 * nodes + 50;
    let max_iter = 200 * nodes * nodes + 10_000;

    for _ in 0..max_iter {
        // Potentials: u_i + v_j = c_ij on basic cells, rooted at row 0.
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        pot[0] = 0.0;
        depth[0] = 0;
        stack.clear();
        stack.push(0);
        let mut seen = vec![false; nodes];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &c in &tree.adj[v] {
                let w = tree.other(c, v);
                if seen[w] {
                    continue;
                }
                seen[w] = true;
                let (ci, cj, _) = tree.cells[c];
                pot[w] = cost[ci * n + cj] - pot[v];
                parent[w] = c;
                depth[w] = depth[v] + 1;
                stack.push(w);
            }
        }

        // Pricing.
        let bland = degenerate_run > bland_after;
        let mut enter: Option<(usize, usize)> = None;
        let mut best = -tol;
        'price: for a in 0..m {
            let ua = pot[a];
            let row = &cost[a * n..(a + 1) * n];
            for (b, &c) in row.iter().enumerate() {
                let rc = c - ua - pot[m + b];
                if rc < best {
                    enter = Some((a, b));
                    if bland {
                        break 'price;
                    }
                    best = rc;
                }
            }
        }
        let Some((ei, ej)) = enter else { break };

        // Cycle: path from column ej up to the LCA and down to row ei.
        let mut from_col = Vec::new();
        let mut from_row = Vec::new();
        let (mut a, mut b) = (tree.col(ej), ei);
        while depth[a] > depth[b] {
            let c = parent[a];
            from_col.push(c);
            a = tree.other(c, a);
        }
        while depth[b] > depth[a] {
            let c = parent[b];
            from_row.push(c);
            b = tree.other(c, b);
        }
        while a != b {
            let c = parent[a];
            from_col.push(c);
            a = tree.other(c, a);
            let c = parent[b];
            from_row.push(c);
            b = tree.other(c, b);
        }
        from_row.reverse();
        let cycle: Vec<usize> = from_col.into_iter().chain(from_row).collect();

        // Even positions along the cycle lose flow, odd positions gain it.
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for &c in cycle.iter().step_by(2) {
            let f = tree.cells[c].2;
            let take = if bland { f < theta || (f == theta && c < leave) } else { f <= theta };
            if take {
                theta = f;
                leave = c;
            }
        }
        for (k, &c) in cycle.iter().enumerate() {
            let cell = &mut tree.cells[c];
            if k % 2 == 0 {
                cell.2 = (cell.2 - theta).max(0.0);
            } else {
                cell.2 += theta;
            }
        }
        if theta == 0.0 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
        tree.replace(leave, ei, ej, theta);
    }
    tree.cells
}
