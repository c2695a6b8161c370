fn main() {
    std::process::exit(mujica::cli::main_with_args(std::env::args_os()));
}
