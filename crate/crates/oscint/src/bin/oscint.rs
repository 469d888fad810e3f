fn main() {
    eprintln!("oscint CLI: subcommands are being assembled; use the library examples for now");
    std::process::exit(2);
}
