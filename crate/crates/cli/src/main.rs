use clap::Parser;

fn main() {
    let cli = match polaron_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(polaron_cli::run(&cli));
}
