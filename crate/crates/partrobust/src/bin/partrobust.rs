fn main() {
    std::process::exit(partrobust::cli::main_entry(std::env::args_os()));
}
