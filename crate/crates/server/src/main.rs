fn main() {
    std::process::exit(teleop_server::cli::run(std::env::args_os()));
}
