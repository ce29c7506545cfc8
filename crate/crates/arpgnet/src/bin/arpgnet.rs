use clap::Parser;

fn main() {
    let cli = arpgnet::cli::Cli::parse();
    if let Err(e) = arpgnet::cli::run(cli) {
        let message = e.to_string().replace('\n', "; ");
        eprintln!("error[{}] {message}", e.category());
        std::process::exit(1);
    }
}
