fn main() {
    std::process::exit(crowdiff::cli::main_with(std::env::args_os()));
}
