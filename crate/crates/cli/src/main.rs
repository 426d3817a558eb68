fn main() {
    std::process::exit(cegcl_cli::run(std::env::args_os()));
}
