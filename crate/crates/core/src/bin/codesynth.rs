use clap::Parser;

fn main() -> std::process::ExitCode {
    codesynth::cli::main_with(codesynth::cli::Cli::parse())
}
