fn main() {
    std::process::exit(emr_transfer::cli::run_command(std::env::args_os()));
}
