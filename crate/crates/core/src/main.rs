fn main() {
    std::process::exit(radlabel::cli::main());
}
