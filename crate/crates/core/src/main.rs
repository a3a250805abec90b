fn main() {
    std::process::exit(hdlm::cli::run(std::env::args_os()));
}
