use std::path::PathBuf;

use stratdiff_lab::cli;

fn main() {
    let root = std::env::var_os(cli::OUT_ENV).map(PathBuf::from);
    std::process::exit(cli::run(std::env::args_os(), root.as_deref()));
}
