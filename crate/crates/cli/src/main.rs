fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(tgc_cli::run(&argv));
}
