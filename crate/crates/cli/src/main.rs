fn main() {
    std::process::exit(auscultqa_cli::run(std::env::args_os()));
}
