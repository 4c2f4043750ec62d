fn main() {
    std::process::exit(visaff_core::cli::run(std::env::args_os()));
}
