fn main() {
    std::process::exit(caravan::cli::run(std::env::args_os()));
}
