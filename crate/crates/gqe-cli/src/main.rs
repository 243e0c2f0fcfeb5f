fn main() {
    std::process::exit(gqe_cli::run());
}
