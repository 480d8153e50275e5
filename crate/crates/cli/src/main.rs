fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COVCAL_LOG", "warn")).init();
    std::process::exit(covcal::run_from(std::env::args_os()));
}
