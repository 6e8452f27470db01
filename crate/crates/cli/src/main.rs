use clap::Parser;

fn main() {
    let code = ssmlab::cli::run(ssmlab::cli::Cli::parse());
    std::process::exit(code);
}
