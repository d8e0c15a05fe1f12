fn main() {
    std::process::exit(leakaudit::cli::dispatch(std::env::args_os()));
}
