fn main() {
    std::process::exit(pst_core::cli::run(std::env::args_os()));
}
