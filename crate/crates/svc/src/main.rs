fn main() {
    std::process::exit(procmem::cli::main_from_env());
}
