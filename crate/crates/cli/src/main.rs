fn main() {
    std::process::exit(geoldm_cli::run_command(std::env::args_os()));
}
