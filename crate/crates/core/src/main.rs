use clap::Parser;

use deconvnmt::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = run(cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
