use clap::Parser;

fn main() {
    let cli = hierctl::Cli::parse();
    match hierctl::run(&cli) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
        }
        Err(e) => {
            eprintln!("hierctl {}: {e}", cli.command.name());
            std::process::exit(e.exit_code());
        }
    }
}
