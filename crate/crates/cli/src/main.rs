fn main() {
    std::process::exit(ovdet3d_cli::run(std::env::args_os()));
}
