fn main() {
    std::process::exit(balance_att::cli::main());
}
