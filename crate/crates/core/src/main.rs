fn main() {
    std::process::exit(qcrit::cli::main_entry())
}
