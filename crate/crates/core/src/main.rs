fn main() {
    std::process::exit(klan::pipeline::cli::run(std::env::args_os()));
}
