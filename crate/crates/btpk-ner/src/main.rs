use btpk_ner::cli;

fn main() {
    std::process::exit(cli::run(std::env::args_os().collect()));
}
