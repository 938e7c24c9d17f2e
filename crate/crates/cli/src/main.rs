fn main() {
    std::process::exit(dyadformer_cli::dispatch(std::env::args_os()));
}
