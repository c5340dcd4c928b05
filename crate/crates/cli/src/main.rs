use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use proxyaudit_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(output) => {
            if let Some(dir) = &cli.global.out {
                if let Err(e) = output.write_to(dir) {
                    eprintln!("error: {e}");
                    return ExitCode::from(e.exit_code() as u8);
                }
            }
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(output.render(cli.global.format).as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
