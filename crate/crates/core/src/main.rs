fn main() {
    std::process::exit(kgrules::cli::main());
}
