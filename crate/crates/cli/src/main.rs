use clap::Parser;

fn main() {
    let cli = svv_cli::Cli::parse();
    match svv_cli::run(cli) {
        Ok(summary) => print!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
