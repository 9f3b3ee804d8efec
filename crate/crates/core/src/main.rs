fn main() {
    std::process::exit(slm_harness::cli::main());
}
