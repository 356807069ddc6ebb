fn main() {
    if let Err(e) = dfdi::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(dfdi::cli::exit_code(&e));
    }
}
