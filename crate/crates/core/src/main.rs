fn main() {
    std::process::exit(dfrd::cli::main_with(std::env::args_os()));
}
