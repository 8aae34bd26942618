fn main() {
    std::process::exit(csgm::cli::main());
}
