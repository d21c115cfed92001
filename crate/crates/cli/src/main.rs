fn main() {
    std::process::exit(wavescore_cli::run(std::env::args_os()));
}
