fn main() {
    env_logger::init();
    std::process::exit(dro::cli::main_from_args(std::env::args_os()));
}
