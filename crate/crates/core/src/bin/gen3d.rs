fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(gen3d::cli::run(&argv));
}
