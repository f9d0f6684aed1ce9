use std::io::Write;

fn main() {
    let out = prefpack::cli::run_from_args(std::env::args_os());
    // Reports go to stdout, diagnostics to stderr.
    let _ = std::io::stdout().write_all(out.stdout.as_bytes());
    let _ = std::io::stderr().write_all(out.stderr.as_bytes());
    std::process::exit(out.code);
}
