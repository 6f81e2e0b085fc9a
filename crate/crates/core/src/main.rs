use clap::Parser;

fn main() {
    if let Ok(n) = std::env::var("JETFLOW_THREADS") {
        std::env::set_var("RAYON_NUM_THREADS", n);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = jetflow::cli::Cli::parse();
    if let Err(e) = jetflow::cli::run(cli, &mut std::io::stdout()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
