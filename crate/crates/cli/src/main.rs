use clap::Parser;

fn main() {
    let cli = panocolor_cli::Cli::parse();
    std::process::exit(panocolor_cli::run(cli));
}
