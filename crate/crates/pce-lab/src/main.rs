fn main() {
    std::process::exit(pce_lab::cli::run(std::env::args_os()));
}
