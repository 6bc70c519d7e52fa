use std::process::ExitCode;

fn main() -> ExitCode {
    dml::cli::main()
}
