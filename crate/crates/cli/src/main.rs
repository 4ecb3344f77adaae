fn main() {
    std::process::exit(nodetf_cli::run(std::env::args_os()));
}
