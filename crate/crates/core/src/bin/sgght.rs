fn main() {
    std::process::exit(sgght_core::trainer::run_command(std::env::args_os()));
}
