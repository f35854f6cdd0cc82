fn main() {
    std::process::exit(mmgcd::cli::main());
}
