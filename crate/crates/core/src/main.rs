fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = mfirl::cli::run(std::env::args_os(), std::env::vars().collect());
    std::process::exit(code);
}
