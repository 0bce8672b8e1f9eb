fn main() {
    std::process::exit(rdfnet_core::cli::main_with_args(std::env::args_os()));
}
