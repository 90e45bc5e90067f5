fn main() {
    std::process::exit(peerfeedback_cli::run_cli(std::env::args_os()));
}
