fn main() {
    std::process::exit(ssm_core::cli::run_from(std::env::args_os()));
}
