fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(fedln::harness::cli::run(&args));
}
