fn main() {
    std::process::exit(committee_cli::main_with_args(std::env::args_os()));
}
