fn main() {
    std::process::exit(ld3m::cli::main_with_args(std::env::args()));
}
