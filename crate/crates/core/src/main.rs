fn main() -> std::process::ExitCode {
    gvida::cli::main()
}
