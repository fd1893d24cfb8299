fn main() {
    std::process::exit(mmparareal_cli::main_with_args(std::env::args_os()));
}
