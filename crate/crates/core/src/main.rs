use clap::Parser;

fn main() {
    let cli = safin::cli::Cli::parse();
    let code = safin::cli::run(cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
