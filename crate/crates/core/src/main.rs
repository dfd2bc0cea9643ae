fn main() {
    std::process::exit(upconv_core::cli::run());
}
