fn main() {
    std::process::exit(switchbox_cli::run(std::env::args_os()));
}
