fn main() {
    std::process::exit(count_ate::cli::run(std::env::args_os()));
}
