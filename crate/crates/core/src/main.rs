fn main() {
    std::process::exit(sdo_lab::cli::main_with_args(std::env::args_os()));
}
