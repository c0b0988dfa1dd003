use clap::Parser;

fn main() {
    let cli = switchlab_cli::Cli::parse();
    std::process::exit(switchlab_cli::run(cli));
}
