//! Command-line flags, the optional TOML config file, and the resolved jobs
//! built from them. Flags override the file, which overrides defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use crossdenoise_core::{Components, Delimiter, ModelKind, SplitRatios, Strategy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "crossdenoise",
    version,
    about = "Entity-aware loss reweighting for implicit-feedback recommenders"
)]
pub struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML file with defaults for any command.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for evaluation and sweeps.
    #[arg(long, global = true, env = "CROSSDENOISE_WORKERS")]
    pub workers: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Binarize a ratings file (or generate synthetic data) and split it.
    Prepare(PrepareArgs),
    /// Train one model per seed and report test metrics.
    Train(TrainArgs),
    /// Train every component combination of the ablation grid.
    Ablate(AblateArgs),
    /// Sweep (alpha, beta) and classify local curvature.
    Sweep(SweepArgs),
    /// Re-run a recorded command and check its artifacts against the manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Ratings file: user, item, rating[, timestamp] per line.
    #[arg(long, value_name = "FILE", conflicts_with = "synth_users")]
    pub input: Option<PathBuf>,
    /// Field delimiter: tab, comma, or any single character.
    #[arg(long)]
    pub delimiter: Option<String>,
    /// Ratings at or below this value are flagged as noisy.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// train:valid:test proportions.
    #[arg(long)]
    pub ratios: Option<String>,
    /// Generate a synthetic dataset with this many users instead of reading a file.
    #[arg(long, requires = "synth_items")]
    pub synth_users: Option<usize>,
    #[arg(long, requires = "synth_users")]
    pub synth_items: Option<usize>,
    #[arg(long)]
    pub synth_latent: Option<usize>,
    /// Share of synthetic interactions that are injected false positives.
    #[arg(long)]
    pub synth_noise: Option<f64>,
    #[arg(long)]
    pub synth_density: Option<f64>,
}

/// Training flags shared by `train`, `ablate` and `sweep`.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub model: Option<String>,
    /// ecdf, uniform, gmm, topk or linear.
    #[arg(long)]
    pub weighting: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Negatives sampled per positive.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Kept share for the topk strategy.
    #[arg(long)]
    pub remember_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// CDAE input dropout rate.
    #[arg(long)]
    pub corruption: Option<f64>,
    /// Comma-separated ranking cutoffs.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long, value_name = "DIR")]
    pub split: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Subset of bw,if,uf; empty or "none" disables reweighting.
    #[arg(long)]
    pub components: Option<String>,
    /// Add wall-clock seconds to the epoch log (makes it non-reproducible).
    #[arg(long)]
    pub timings: bool,
    /// Also write the last epoch's weight table per seed.
    #[arg(long)]
    pub dump_weights: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub split: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Semicolon-separated component sets, e.g. "none;bw;bw,if;bw,uf;bw,if,uf".
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub components: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    pub split: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub betas: Option<Vec<f64>>,
    /// Anchor `alpha:beta` for a 3x3 stencil; repeatable. Replaces the grid.
    #[arg(long, value_name = "ALPHA:BETA")]
    pub stencil: Vec<String>,
    /// Stencil step in both directions.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub components: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A manifest.json written by an earlier run.
    pub manifest: PathBuf,
}

/// The optional TOML config file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub split: Option<PathBuf>,
    pub prepare: PrepareFile,
    pub train: TrainConfig,
    pub ablate: AblateFile,
    pub sweep: SweepFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareFile {
    pub input: Option<PathBuf>,
    pub delimiter: Option<String>,
    pub threshold: Option<f64>,
    pub ratios: Option<String>,
    pub synth: Option<SynthJob>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateFile {
    pub grid: Option<Vec<Components>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    pub alphas: Option<Vec<f64>>,
    pub betas: Option<Vec<f64>>,
    pub stencil: Option<Vec<[f64; 2]>>,
    pub step: Option<f64>,
    pub max_epochs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// A fully resolved command, as stored in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Job {
    Prepare(PrepareJob),
    Train(TrainJob),
    Ablate(AblateJob),
    Sweep(SweepJob),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthJob {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    pub noise_fraction: f64,
    pub density: f64,
    pub propensity_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareJob {
    pub input: Option<PathBuf>,
    pub synth: Option<SynthJob>,
    pub delimiter: String,
    pub threshold: f64,
    pub ratios: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub split: PathBuf,
    pub seeds: Vec<u64>,
    pub timings: bool,
    pub dump_weights: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateJob {
    pub split: PathBuf,
    pub seeds: Vec<u64>,
    pub grid: Vec<Components>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepJob {
    pub split: PathBuf,
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Stencil anchors; when nonempty the grid is not swept.
    pub stencil: Vec<[f64; 2]>,
    pub step: f64,
    pub train: TrainConfig,
}

pub const DEFAULT_SWEEP_EPOCHS: usize = 40;
pub const DEFAULT_SWEEP_SEEDS: u64 = 3;
pub const DEFAULT_STENCIL_STEP: f64 = 0.01;

fn parse_components(s: &str) -> Result<Components> {
    let c: Components = s.parse().map_err(|e| usage(format!("--components: {e}")))?;
    check_components(c)?;
    Ok(c)
}

/// Entity factors only make sense on top of a base weight.
pub fn check_components(c: Components) -> Result<()> {
    if (c.item || c.user) && !c.base {
        return Err(usage(format!("components \"{c}\" enable IF/UF without BW")));
    }
    Ok(())
}

fn parse_delimiter(s: &str) -> Result<Delimiter> {
    Delimiter::parse(s).map_err(|e| usage(format!("--delimiter: {e}")))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(CliError::io(path))
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(m) = &self.model {
            cfg.model = m.parse::<ModelKind>().map_err(|e| usage(format!("--model: {e}")))?;
        }
        if let Some(w) = &self.weighting {
            cfg.weighting.strategy = w.parse::<Strategy>().map_err(|e| usage(format!("--weighting: {e}")))?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(alpha => alpha, beta => beta, lr => lr, batch_size => batch_size,
             negatives => negative_ratio, dim => embedding_dim, epochs => max_epochs,
             patience => patience, weight_decay => weight_decay, corruption => corruption_rate);
        if let Some(r) = self.remember_rate {
            cfg.weighting.remember_rate = r;
        }
        if let Some(ks) = &self.ks {
            cfg.eval_ks = ks.clone();
            if !ks.contains(&cfg.selection_k) {
                cfg.selection_k = ks[0];
            }
        }
        Ok(())
    }
}

/// Resolution context shared by every command.
pub struct Resolver<'a> {
    pub cli_seed: Option<u64>,
    pub file: &'a FileConfig,
}

impl Resolver<'_> {
    fn root_seed(&self) -> u64 {
        self.cli_seed.or(self.file.seed).unwrap_or(0)
    }

    fn seeds(&self, flag: &Option<Vec<u64>>, default_count: u64) -> Result<Vec<u64>> {
        let seeds = match (flag, &self.file.seeds) {
            (Some(s), _) | (None, Some(s)) => s.clone(),
            (None, None) => {
                let root = self.root_seed();
                (0..default_count).map(|k| root + k).collect()
            }
        };
        if seeds.is_empty() {
            return Err(usage("at least one seed is required"));
        }
        Ok(seeds)
    }

    fn split_dir(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        let dir = flag
            .clone()
            .or_else(|| self.file.split.clone())
            .ok_or_else(|| usage("--split is required"))?;
        absolute(&dir)
    }

    fn train_config(&self, flags: &TrainFlags, components: &Option<String>) -> Result<TrainConfig> {
        let mut cfg = self.file.train.clone();
        flags.apply(&mut cfg)?;
        if let Some(c) = components {
            cfg.components = parse_components(c)?;
        }
        check_components(cfg.components)?;
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn prepare(&self, a: &PrepareArgs) -> Result<PrepareJob> {
        let f = &self.file.prepare;
        let synth = match (a.synth_users, a.synth_items) {
            (Some(users), Some(items)) => Some(SynthJob {
                users,
                items,
                latent_dim: a.synth_latent.unwrap_or(8),
                noise_fraction: a.synth_noise.unwrap_or(0.3),
                density: a.synth_density.unwrap_or(0.05),
                propensity_spread: 1.0,
            }),
            _ if a.input.is_some() => None,
            _ => f.synth.clone(),
        };
        let input = match (&a.input, &synth) {
            (Some(p), _) => Some(absolute(p)?),
            (None, Some(_)) => None,
            (None, None) => Some(absolute(
                f.input.as_deref().ok_or_else(|| usage("prepare needs --input or --synth-users/--synth-items"))?,
            )?),
        };
        let job = PrepareJob {
            input,
            synth,
            delimiter: a.delimiter.clone().or_else(|| f.delimiter.clone()).unwrap_or_else(|| "tab".into()),
            threshold: a.threshold.or(f.threshold).unwrap_or(3.0),
            ratios: a.ratios.clone().or_else(|| f.ratios.clone()).unwrap_or_else(|| SplitRatios::default().to_string()),
            seed: self.root_seed(),
        };
        parse_delimiter(&job.delimiter)?;
        SplitRatios::parse(&job.ratios).map_err(|e| usage(format!("--ratios: {e}")))?;
        if !job.threshold.is_finite() {
            return Err(usage("--threshold must be finite"));
        }
        Ok(job)
    }

    pub fn train(&self, a: &TrainArgs) -> Result<TrainJob> {
        Ok(TrainJob {
            split: self.split_dir(&a.split)?,
            seeds: self.seeds(&a.seeds, 1)?,
            timings: a.timings,
            dump_weights: a.dump_weights,
            train: self.train_config(&a.train, &a.components)?,
        })
    }

    pub fn ablate(&self, a: &AblateArgs) -> Result<AblateJob> {
        let grid = match (&a.grid, &self.file.ablate.grid) {
            (Some(g), _) => g.split(';').map(|c| parse_components(c.trim())).collect::<Result<Vec<_>>>()?,
            (None, Some(g)) => g.clone(),
            (None, None) => Components::ablation_rows().to_vec(),
        };
        if grid.is_empty() {
            return Err(usage("ablation grid is empty"));
        }
        for c in &grid {
            check_components(*c)?;
        }
        Ok(AblateJob {
            split: self.split_dir(&a.split)?,
            seeds: self.seeds(&a.seeds, 1)?,
            grid,
            train: self.train_config(&a.train, &a.components)?,
        })
    }

    pub fn sweep(&self, a: &SweepArgs) -> Result<SweepJob> {
        let f = &self.file.sweep;
        let mut train = self.train_config(&a.train, &a.components)?;
        if a.train.epochs.is_none() {
            train.max_epochs = f.max_epochs.unwrap_or(DEFAULT_SWEEP_EPOCHS);
        }
        let stencil = if !a.stencil.is_empty() {
            a.stencil
                .iter()
                .map(|s| {
                    let (x, y) = s
                        .split_once(':')
                        .ok_or_else(|| usage(format!("--stencil {s:?} must be ALPHA:BETA")))?;
                    let p = |v: &str| v.trim().parse::<f64>().map_err(|_| usage(format!("--stencil {s:?}: bad number")));
                    Ok([p(x)?, p(y)?])
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            f.stencil.clone().unwrap_or_default()
        };
        let step = a.step.or(f.step).unwrap_or(DEFAULT_STENCIL_STEP);
        let alphas = a.alphas.clone().or_else(|| f.alphas.clone()).unwrap_or_default();
        let betas = a.betas.clone().or_else(|| f.betas.clone()).unwrap_or_default();
        if stencil.is_empty() && (alphas.is_empty() || betas.is_empty()) {
            return Err(usage("sweep needs --alphas and --betas, or --stencil"));
        }
        if alphas.iter().chain(&betas).chain(stencil.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(usage("grid values must be finite"));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(usage("--step must be positive"));
        }
        for [x, y] in &stencil {
            if !(*x - step >= 0.0 && *x + step <= *y - step) {
                return Err(usage(format!(
                    "stencil around ({x}, {y}) with step {step} leaves the domain 0 <= alpha <= beta"
                )));
            }
        }
        Ok(SweepJob {
            split: self.split_dir(&a.split)?,
            seeds: self.seeds(&a.seeds, DEFAULT_SWEEP_SEEDS)?,
            alphas,
            betas,
            stencil,
            step,
            train,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolver(file: &FileConfig) -> Resolver<'_> {
        Resolver { cli_seed: None, file }
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file: FileConfig = toml::from_str("seed = 9\n[train]\nalpha = 0.5\nbeta = 3.0\nlr = 0.01\n").unwrap();
        let flags = TrainFlags { beta: Some(4.0), ..Default::default() };
        let cfg = resolver(&file).train_config(&flags, &None).unwrap();
        assert_eq!((cfg.alpha, cfg.beta, cfg.lr, cfg.batch_size), (0.5, 4.0, 0.01, 2048));
        assert_eq!(resolver(&file).seeds(&None, 3).unwrap(), vec![9, 10, 11]);
    }

    #[test]
    fn invalid_combinations_are_usage_errors() {
        let file = FileConfig::default();
        let r = resolver(&file);
        let flags = TrainFlags { alpha: Some(2.0), beta: Some(1.0), ..Default::default() };
        assert!(matches!(r.train_config(&flags, &None), Err(CliError::Usage(_))));
        for c in ["if", "uf", "if,uf"] {
            assert!(matches!(r.train_config(&TrainFlags::default(), &Some(c.into())), Err(CliError::Usage(_))));
        }
        assert!(r.train_config(&TrainFlags::default(), &Some(String::new())).unwrap().components.is_none());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nalpah = 1.0\n").is_err());
    }

    #[test]
    fn job_round_trips_through_json() {
        let job = Job::Sweep(SweepJob {
            split: "/tmp/s".into(),
            seeds: vec![1, 2],
            alphas: vec![0.0, 1.0],
            betas: vec![1.0, 2.0],
            stencil: vec![[1.0, 2.0]],
            step: 0.01,
            train: TrainConfig::default(),
        });
        let text = serde_json::to_string(&job).unwrap();
        assert_eq!(serde_json::from_str::<Job>(&text).unwrap(), job);
    }
}
