fn main() {
    std::process::exit(nemo_ffa::cli::run(std::env::args_os()));
}
