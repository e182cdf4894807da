fn main() {
    // CLI wiring lands once the library surface exists.
    eprintln!("cmiwae: not yet wired");
    std::process::exit(2);
}
