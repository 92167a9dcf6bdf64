fn main() {
    std::process::exit(calm_core::cli::main());
}
