fn main() {
    std::process::exit(memreasoner::cli::run(std::env::args_os()));
}
