fn main() {
    std::process::exit(hitrans::cli::main());
}
