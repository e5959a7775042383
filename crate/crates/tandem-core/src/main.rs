fn main() {
    std::process::exit(tandem_core::run_cli());
}
