fn main() {
    std::process::exit(mechgeo::cli::run_cli(std::env::args_os()));
}
