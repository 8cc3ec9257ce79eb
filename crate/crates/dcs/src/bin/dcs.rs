fn main() {
    std::process::exit(dcs::cli::main());
}
