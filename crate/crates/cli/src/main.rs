fn main() {
    std::process::exit(calibforge::run(std::env::args_os()));
}
