fn main() {
    std::process::exit(unfused::experiment::run_command(std::env::args_os()));
}
