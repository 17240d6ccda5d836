fn main() {
    std::process::exit(compt::cli::run(std::env::args_os()));
}
