fn main() {
    trader_cli::init_logging();
    std::process::exit(trader_cli::run(std::env::args_os()));
}
