use std::process::ExitCode;

fn main() -> ExitCode {
    let rc = match hydravit_cli::parse_args(std::env::args_os()) {
        Ok(rc) => rc,
        Err(e) => e.exit(),
    };
    let level = match rc.verbosity {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match hydravit_cli::run(&rc) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
