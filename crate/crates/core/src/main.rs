fn main() {
    let code = regkit::cli::run(std::env::args_os().collect(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
