fn main() {
    std::process::exit(tosuda::cli::main());
}
