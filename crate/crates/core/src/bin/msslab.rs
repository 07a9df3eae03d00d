use std::panic;
use std::process::ExitCode;

use msslab::cli::{run, EXIT_INTERNAL};

fn main() -> ExitCode {
    panic::set_hook(Box::new(|info| {
        eprintln!("internal error: {info}");
    }));
    let code = panic::catch_unwind(|| {
        let stdout = std::io::stdout();
        let stderr = std::io::stderr();
        run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
    })
    .unwrap_or(EXIT_INTERNAL);
    ExitCode::from(code as u8)
}
