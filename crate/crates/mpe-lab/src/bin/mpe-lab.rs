use clap::Parser;

fn main() {
    let args = mpe_lab::cli::Args::parse();
    std::process::exit(mpe_lab::cli::main_with_args(args));
}
