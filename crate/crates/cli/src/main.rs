fn main() {
    std::process::exit(dq_cli::run(std::env::args_os()));
}
