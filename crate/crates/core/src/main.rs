fn main() {
    std::process::exit(accent_hybrid::cli::dispatch(std::env::args_os()));
}
