fn main() {
    std::process::exit(fluidforge::main_with(std::env::args_os()));
}
