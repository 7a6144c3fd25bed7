fn main() {
    std::process::exit(zeroddi::cli::run(std::env::args_os()));
}
