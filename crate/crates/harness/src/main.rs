fn main() -> std::process::ExitCode {
    qask::cli::main()
}
