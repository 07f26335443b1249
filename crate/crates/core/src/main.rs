fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter_or("CWSS_LOG", "warn")
            .write_style("CWSS_LOG_STYLE"),
    )
    .init();
    std::process::exit(cwss::cli::run(std::env::args_os()));
}
