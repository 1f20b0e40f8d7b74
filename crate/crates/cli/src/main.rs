fn main() {
    std::process::exit(pseudolabel_cli::run(std::env::args_os()));
}
