fn main() {
    std::process::exit(nested_hmm::cli::run_command(std::env::args_os()));
}
