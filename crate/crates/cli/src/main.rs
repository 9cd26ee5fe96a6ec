fn main() {
    std::process::exit(probprompt_cli::run(std::env::args_os()));
}
