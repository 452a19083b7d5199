fn main() {
    std::process::exit(poseloss::cli::run(std::env::args()));
}
