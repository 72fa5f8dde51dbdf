use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use committee_core::data::SyntheticConfig;
use committee_core::models::preset_menu;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "committee", version, about = "Committee distillation experiments on rating data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Train one method for every seed; writes per-seed reports and aggregate.csv.
    Run(ExperimentArgs),
    /// Every method against each single teacher and the whole committee.
    Matrix(ExperimentArgs),
    /// Train the committee and dump per-example importance scores.
    ImportanceDump(ExperimentArgs),
    /// Train and checkpoint the committee's teachers.
    Teachers(ExperimentArgs),
    /// Render a methods × committees table from reports or a method,committee,metric CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// `synthetic`, `synthetic:users=..,items=..,latent=..,noise=..,ratings=..`, or a CSV path.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// qa, ld, fd, mt or none.
    #[arg(long, default_value = "qa")]
    pub method: String,
    /// Comma-separated teacher presets (mlp-s, mlp-m, mlp-l, text).
    #[arg(long, value_delimiter = ',', default_value = "mlp-l,text")]
    pub teachers: Vec<String>,
    #[arg(long, default_value = "mlp-s")]
    pub student: String,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "d-emb", default_value_t = 16)]
    pub d_emb: usize,
    #[arg(long = "d-m", default_value_t = 32)]
    pub d_m: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Most epochs a teacher trains for; it keeps its best epoch on a held-out slice.
    #[arg(long = "teacher-epochs", default_value_t = 20)]
    pub teacher_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long = "batch-size", default_value_t = 128)]
    pub batch_size: usize,
    /// Divides every preset's hidden widths.
    #[arg(long = "width-divisor", default_value_t = 8)]
    pub width_divisor: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Report JSON files, directories of them, or method,committee,metric CSVs.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Run,
    Matrix,
    ImportanceDump,
    Teachers,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Matrix => "matrix",
            Command::ImportanceDump => "importance-dump",
            Command::Teachers => "teachers",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The committee method: question/answer augmenters with importance weights.
    Qa,
    Ld,
    Fd,
    Mt,
    None,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Qa, Method::Ld, Method::Fd, Method::Mt, Method::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Qa => "qa",
            Method::Ld => "ld",
            Method::Fd => "fd",
            Method::Mt => "mt",
            Method::None => "none",
        }
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown method `{s}` (qa, ld, fd, mt, none)")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where examples come from. Synthetic data is regenerated per seed.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        n_users: usize,
        n_items: usize,
        latent_dim: usize,
        noise_sd: f64,
        n_ratings: usize,
    },
    Csv(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        DatasetSource::Synthetic {
            n_users: d.n_users,
            n_items: d.n_items,
            latent_dim: d.latent_dim,
            noise_sd: d.noise_sd,
            n_ratings: d.n_ratings,
        }
    }
}

impl DatasetSource {
    pub fn synthetic_config(&self, seed: u64) -> Option<SyntheticConfig> {
        match *self {
            DatasetSource::Synthetic {
                n_users,
                n_items,
                latent_dim,
                noise_sd,
                n_ratings,
            } => Some(SyntheticConfig {
                n_users,
                n_items,
                latent_dim,
                noise_sd,
                n_ratings,
                seed,
            }),
            DatasetSource::Csv(_) => None,
        }
    }
}

impl FromStr for DatasetSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DatasetSource::default());
        }
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let DatasetSource::Synthetic {
                mut n_users,
                mut n_items,
                mut latent_dim,
                mut noise_sd,
                mut n_ratings,
            } = DatasetSource::default()
            else {
                unreachable!()
            };
            for pair in rest.split(',').filter(|p| !p.is_empty()) {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("dataset option `{pair}` is not key=value")))?;
                let bad = || CliError::Config(format!("dataset option `{pair}` has an invalid value"));
                match key {
                    "users" => n_users = value.parse().map_err(|_| bad())?,
                    "items" => n_items = value.parse().map_err(|_| bad())?,
                    "latent" => latent_dim = value.parse().map_err(|_| bad())?,
                    "noise" => noise_sd = value.parse().map_err(|_| bad())?,
                    "ratings" => n_ratings = value.parse().map_err(|_| bad())?,
                    other => {
                        return Err(CliError::Config(format!(
                            "unknown dataset option `{other}` (users, items, latent, noise, ratings)"
                        )))
                    }
                }
            }
            return Ok(DatasetSource::Synthetic {
                n_users,
                n_items,
                latent_dim,
                noise_sd,
                n_ratings,
            });
        }
        let path = s.strip_prefix("csv:").unwrap_or(s);
        if path.is_empty() {
            return Err(CliError::Config("empty dataset path".into()));
        }
        Ok(DatasetSource::Csv(PathBuf::from(path)))
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            s if *s == DatasetSource::default() => f.write_str("synthetic"),
            DatasetSource::Synthetic {
                n_users,
                n_items,
                latent_dim,
                noise_sd,
                n_ratings,
            } => write!(
                f,
                "synthetic:users={n_users},items={n_items},latent={latent_dim},noise={noise_sd},ratings={n_ratings}"
            ),
            DatasetSource::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

impl Serialize for DatasetSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DatasetSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// A fully resolved experiment: everything needed to reproduce its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub dataset: DatasetSource,
    pub method: Method,
    pub teachers: Vec<String>,
    pub student: String,
    pub alpha: f64,
    pub threshold: Option<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub d_emb: usize,
    pub d_m: usize,
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub width_divisor: usize,
}

impl ExperimentConfig {
    pub fn from_args(command: Command, a: &ExperimentArgs) -> Result<Self> {
        let cfg = ExperimentConfig {
            command,
            dataset: a.dataset.parse()?,
            method: a.method.parse()?,
            teachers: a.teachers.iter().map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
            student: a.student.clone(),
            alpha: a.alpha,
            threshold: a.threshold,
            seeds: a.seeds.clone(),
            out: a.out.clone(),
            d_emb: a.d_emb,
            d_m: a.d_m,
            epochs: a.epochs,
            teacher_epochs: a.teacher_epochs,
            lr: a.lr,
            batch_size: a.batch_size,
            width_divisor: a.width_divisor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a full command line (program name first).
    pub fn parse_from<I, T>(argv: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<std::ffi::OsString> + Clone,
    {
        let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Config(e.to_string()))?;
        match cli.command {
            CliCommand::Run(a) => Self::from_args(Command::Run, &a),
            CliCommand::Matrix(a) => Self::from_args(Command::Matrix, &a),
            CliCommand::ImportanceDump(a) => Self::from_args(Command::ImportanceDump, &a),
            CliCommand::Teachers(a) => Self::from_args(Command::Teachers, &a),
            CliCommand::Report(_) => Err(CliError::Config("`report` takes no experiment configuration".into())),
        }
    }

    /// The command line that reproduces this configuration.
    pub fn to_args(&self) -> Vec<String> {
        let mut v: Vec<String> = vec!["committee".into(), self.command.as_str().into()];
        let mut push = |k: &str, val: String| {
            v.push(format!("--{k}"));
            v.push(val);
        };
        push("dataset", self.dataset.to_string());
        push("method", self.method.to_string());
        push("teachers", self.teachers.join(","));
        push("student", self.student.clone());
        push("alpha", self.alpha.to_string());
        if let Some(t) = self.threshold {
            push("threshold", t.to_string());
        }
        push(
            "seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        push("out", self.out.display().to_string());
        push("d-emb", self.d_emb.to_string());
        push("d-m", self.d_m.to_string());
        push("epochs", self.epochs.to_string());
        push("teacher-epochs", self.teacher_epochs.to_string());
        push("lr", self.lr.to_string());
        push("batch-size", self.batch_size.to_string());
        push("width-divisor", self.width_divisor.to_string());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let presets: Vec<&str> = preset_menu().into_iter().map(|(n, _, _)| n).collect();
        for name in self.teachers.iter().chain(std::iter::once(&self.student)) {
            if !presets.contains(&name.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown model `{name}` (choose from {})",
                    presets.join(", ")
                )));
            }
        }
        let mut seen = self.teachers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.teachers.len() {
            return Err(CliError::Config("a teacher is listed twice".into()));
        }
        if self.teachers.is_empty() && (self.method != Method::None || self.command != Command::Run) {
            return Err(CliError::Config("--teachers must name at least one teacher".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("--seeds must list at least one seed".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(CliError::Config("a seed is listed twice".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CliError::Config(format!("--alpha {} must be finite and ≥ 0", self.alpha)));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(CliError::Config(format!("--threshold {t} must lie strictly between 0 and 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!("--lr {} must be positive", self.lr)));
        }
        for (flag, v) in [
            ("--d-emb", self.d_emb),
            ("--d-m", self.d_m),
            ("--epochs", self.epochs),
            ("--teacher-epochs", self.teacher_epochs),
            ("--batch-size", self.batch_size),
            ("--width-divisor", self.width_divisor),
        ] {
            if v == 0 {
                return Err(CliError::Config(format!("{flag} must be positive")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
