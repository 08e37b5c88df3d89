fn main() {
    std::process::exit(switchgrid::cli::main_with_args(std::env::args_os()));
}
