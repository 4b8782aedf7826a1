fn main() -> std::process::ExitCode {
    revisp::cli::main()
}
