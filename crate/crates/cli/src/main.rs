fn main() {
    std::process::exit(lstdq_cli::run(std::env::args_os()));
}
