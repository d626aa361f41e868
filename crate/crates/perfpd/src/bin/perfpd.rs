fn main() {
    let code = perfpd::cli_report::cli_main(std::env::args_os());
    std::process::exit(code);
}
