use clap::Parser;

fn main() {
    let cli = dlon_bench::Cli::parse();
    let code = match dlon_bench::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
