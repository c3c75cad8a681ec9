fn main() {
    std::process::exit(mt3d_cli::run(std::env::args_os()));
}
