use clap::Parser;

fn main() {
    let cli = aai_cli::Cli::parse();
    match aai_cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
