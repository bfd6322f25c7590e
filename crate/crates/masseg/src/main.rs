fn main() {
    std::process::exit(masseg::run_cli());
}
