fn main() {
    std::process::exit(indret::cli::main_entry(std::env::args_os()));
}
