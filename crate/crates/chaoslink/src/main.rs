fn main() {
    std::process::exit(chaoslink::cli::main_with_args(std::env::args_os()));
}
