use std::process::ExitCode;

fn main() -> ExitCode {
    tree_tiler::cli::main_entry()
}
