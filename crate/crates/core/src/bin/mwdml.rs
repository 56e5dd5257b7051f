fn main() -> std::process::ExitCode {
    mwdml::cli::main()
}
