fn main() {
    std::process::exit(mfg_core::cli::run(std::env::args_os()));
}
