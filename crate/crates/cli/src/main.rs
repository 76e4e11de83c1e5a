//! `sonartrack`: data generation, training, tracking, evaluation and plots.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use sonartrack::config;
use sonartrack::Error;

#[derive(Debug, Parser)]
#[command(name = "sonartrack", version, about = "Camera + sonar single-object tracker")]
pub struct Cli {
    /// Named settings profile (full, toy).
    #[arg(long, global = true)]
    pub profile: Option<String>,

    /// TOML config file layered over the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Single worker thread everywhere; outputs are bit-stable.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic toy benchmark, training data and a preview grid.
    Datagen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model on SOT sequences and detection images.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// A `datagen` output folder; fills in train.sot_root and
        /// train.detection_json when they are unset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run one-pass tracking over a benchmark and write result files.
    Track {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Echo the annotations instead of running a network.
        #[arg(long)]
        oracle: bool,
    },
    /// Score a results folder; writes summary.json and table.md.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tracker name in the summary; defaults to the results folder name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Draw success/precision curves and attribute radars from summaries.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

/// Splits `--a.b=value` / `--a.b value` config overrides from the other
/// arguments. Any long flag whose name contains a dot is an override.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--" {
            rest.push(a);
            rest.extend(it);
            break;
        }
        let Some(flag) = s.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.next() {
                Some(v) => v.to_string_lossy().into_owned(),
                None => return Err(format!("--{key} needs a value")),
            },
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn help_footer() -> String {
    let mut s = String::from(
        "Any config key can be set with --key=value (for example --train.lr=1e-4,\n\
         --scam.layers=[] or --srst.saliency=off). Short aliases: scam.layers,\n\
         scam.mode, backbone.depth, backbone.dim.\n\n\
         Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.\n\n\
         Config keys and defaults (full profile):\n",
    );
    for line in config::key_listing() {
        s.push_str("  ");
        s.push_str(&line);
        s.push('\n');
    }
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, overrides) = match split_overrides(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cmd = Cli::command().after_long_help(help_footer()).after_help(help_footer());
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = split_overrides(os(&[
            "sonartrack",
            "--profile",
            "toy",
            "train",
            "--train.lr=0.1",
            "--scam.layers",
            "[]",
            "--out",
            "x",
        ]))
        .unwrap();
        assert_eq!(rest, os(&["sonartrack", "--profile", "toy", "train", "--out", "x"]));
        assert_eq!(
            ov,
            vec![("train.lr".to_string(), "0.1".to_string()), ("scam.layers".to_string(), "[]".to_string())]
        );
        assert!(split_overrides(os(&["s", "--train.lr"])).is_err());
    }

    #[test]
    fn cli_parses() {
        Cli::command().debug_assert();
    }
}
