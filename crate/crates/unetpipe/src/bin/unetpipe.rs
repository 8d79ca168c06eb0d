fn main() {
    std::process::exit(unetpipe::cli::run(std::env::args_os()));
}
