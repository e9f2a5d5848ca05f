fn main() {
    std::process::exit(evgrid::cli::dispatch(std::env::args_os()));
}
