fn main() {
    std::process::exit(medbench_cli::run(std::env::args_os().collect()));
}
