fn main() {
    std::process::exit(firerisk_cli::run(std::env::args_os()));
}
