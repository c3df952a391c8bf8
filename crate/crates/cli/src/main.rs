fn main() {
    std::process::exit(cotrain_seg_cli::run_command(std::env::args().skip(1)));
}
