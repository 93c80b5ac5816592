fn main() {
    std::process::exit(hiercon::pipeline::cli::cli_main(std::env::args_os()));
}
