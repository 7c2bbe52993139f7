use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches};
use iagc_core::data::config::KEYS;

/// `--config FILE`, one `--<key> VALUE` flag per configuration key, and
/// repeated `--set key=value`. Flags apply before `--set` entries.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = ConfigArgs::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        if let Some(p) = m.get_one::<PathBuf>("config") {
            self.config = Some(p.clone());
        }
        for (key, _) in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.overrides.push((key.to_string(), v.clone()));
            }
        }
        for s in m.get_many::<String>("set").into_iter().flatten() {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("--set expects key=value, got `{s}`\n"))
            })?;
            self.overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value configuration file"),
        );
        let cmd = KEYS.iter().fold(cmd, |cmd, (key, help)| {
            cmd.arg(
                Arg::new(*key)
                    .long(flag(key))
                    .value_name("VALUE")
                    .help(*help)
                    .help_heading("Configuration"),
            )
        });
        cmd.arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override any configuration key"),
        )
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
