fn main() {
    // Placeholder while the library surface lands; replaced by the clap CLI.
    eprintln!("onpro: cli not wired yet");
    std::process::exit(1);
}
