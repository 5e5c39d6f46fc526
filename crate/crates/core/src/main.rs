fn main() -> std::process::ExitCode {
    protoseg::cli::main()
}
