fn main() {
    std::process::exit(hdrsplat::cli::run(std::env::args_os()));
}
