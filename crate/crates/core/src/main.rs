use std::panic;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use nerd::cli::{error_line, exit_code, run, Cli, EXIT_INTERNAL, EXIT_USER};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first, EXIT_USER));
            return ExitCode::from(EXIT_USER as u8);
        }
    };
    panic::set_hook(Box::new(|_| {}));
    let code = match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(e.kind(), &e.to_string(), code));
            code
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            eprintln!("{}", error_line("internal", &message, EXIT_INTERNAL));
            EXIT_INTERNAL
        }
    };
    ExitCode::from(code as u8)
}
