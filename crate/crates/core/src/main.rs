fn main() -> std::process::ExitCode {
    surrogate_bridge::cli::main()
}
