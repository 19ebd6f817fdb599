fn main() {
    std::process::exit(impact_audit::cli::main());
}
