fn main() {
    std::process::exit(evprobe::cli::run(std::env::args_os()));
}
