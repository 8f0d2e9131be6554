fn main() -> std::process::ExitCode {
    glskf::cli::main()
}
