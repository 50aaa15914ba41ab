fn main() {
    std::process::exit(fskws_cli::run(std::env::args_os()));
}
