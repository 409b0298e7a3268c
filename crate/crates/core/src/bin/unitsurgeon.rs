fn main() {
    std::process::exit(unitsurgeon::workbench::cli::main_with(std::env::args_os()));
}
