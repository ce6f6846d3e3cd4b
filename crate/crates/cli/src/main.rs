mod cli;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use cli::Cli;

/// Bad flags, bad config or missing inputs: exit status 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

/// What a finished command reports: a line or two for people and an object
/// for `--json`.
pub struct Status {
    pub text: String,
    pub json: serde_json::Value,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use roadfill::Error as E;
    if err.downcast_ref::<UserError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(E::Io { .. } | E::Png { .. } | E::NonFiniteLoss { .. } | E::CorruptState(_)) => 2,
        Some(_) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match commands::run(cli.command) {
        Ok(status) => {
            if cli.json {
                let mut obj = status.json;
                obj["ok"] = json!(true);
                println!("{obj}");
            } else {
                println!("{}", status.text);
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = exit_code(&err);
            if cli.json {
                println!("{}", json!({ "ok": false, "error": format!("{err:#}"), "exit_code": code }));
            }
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
