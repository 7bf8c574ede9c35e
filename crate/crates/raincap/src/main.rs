fn main() {
    std::process::exit(raincap::harness::cli(std::env::args_os()));
}
