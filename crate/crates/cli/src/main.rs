use std::process::exit;

fn main() {
    exit(somnadhere_cli::dispatch(std::env::args_os()));
}
