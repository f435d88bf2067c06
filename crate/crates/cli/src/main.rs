use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    match clad_cli::run_from_args(std::env::args_os()) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) if e.exit_code == 0 => {
            print!("{}", e.message);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code.clamp(1, 255) as u8)
        }
    }
}
