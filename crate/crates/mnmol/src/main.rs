fn main() { std::process::exit(mnmol::cli::run()); }
