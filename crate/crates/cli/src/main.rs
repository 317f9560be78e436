fn main() {
    std::process::exit(ladapt::main_with(std::env::args_os()));
}
