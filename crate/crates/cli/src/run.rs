//! Command bodies. Each writes its artifacts under `out` and returns their
//! paths relative to it, plus digests of the inputs it read.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crossdenoise_core::ingest::{self, InteractionDataset};
use crossdenoise_core::landscape::{self, write_verdicts_csv, HessianVerdict, PerformanceSurface};
use crossdenoise_core::trainer::{self, write_epoch_csv};
use crossdenoise_core::{
    Components, DataSplit, Delimiter, MetricsReport, RankingMetric, SplitRatios, SynthConfig,
};

use crate::config::{AblateJob, Job, PrepareJob, SweepJob, TrainJob};
use crate::error::{CliError, Result};
use crate::manifest::{digest, FileDigest};

pub const SPLIT_FILES: [&str; 3] = ["train.tsv", "valid.tsv", "test.tsv"];

/// Collects artifact paths while files are written.
pub struct Outputs {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(CliError::io(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Runs `f` on a buffered writer for `rel` and records the artifact.
    pub fn write<F>(&mut self, rel: impl Into<PathBuf>, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let rel = rel.into();
        let path = self.root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
        let file = File::create(&path).map_err(CliError::io(&path))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(CliError::io(&path))?;
        self.written.push(rel);
        Ok(())
    }

    /// Writes CSV rows through the `csv` crate.
    pub fn csv(&mut self, rel: impl Into<PathBuf>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.write(rel, |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(header)?;
            for r in rows {
                out.write_record(r)?;
            }
            out.flush().map_err(|e| CliError::Core(e.into()))?;
            Ok(())
        })
    }

    pub fn into_paths(self) -> Vec<PathBuf> {
        self.written
    }
}

pub fn execute(job: &Job, out: &Path) -> Result<(Vec<FileDigest>, Vec<PathBuf>)> {
    let mut outputs = Outputs::new(out)?;
    let inputs = match job {
        Job::Prepare(j) => prepare(j, &mut outputs)?,
        Job::Train(j) => train(j, &mut outputs)?,
        Job::Ablate(j) => ablate(j, &mut outputs)?,
        Job::Sweep(j) => sweep(j, &mut outputs)?,
    };
    Ok((inputs, outputs.into_paths()))
}

fn prepare(job: &PrepareJob, out: &mut Outputs) -> Result<Vec<FileDigest>> {
    let mut inputs = Vec::new();
    let dataset = match (&job.input, &job.synth) {
        (Some(path), _) => {
            let delimiter = Delimiter::parse(&job.delimiter)?;
            let file = File::open(path).map_err(CliError::io(path))?;
            let ratings = ingest::parse_ratings(BufReader::new(file), delimiter).map_err(|source| CliError::Input {
                path: path.clone(),
                source,
            })?;
            inputs.push(digest(path, path.clone())?);
            ingest::binarize(&ratings, job.threshold).map_err(|source| CliError::Input {
                path: path.clone(),
                source,
            })?
        }
        (None, Some(s)) => {
            let cfg = SynthConfig {
                density: s.density,
                propensity_spread: s.propensity_spread,
                ..SynthConfig::new(s.users, s.items, s.latent_dim, s.noise_fraction, job.seed)
            };
            ingest::synth_generate(&cfg)?
        }
        (None, None) => unreachable!("resolver requires an input file or synthetic dimensions"),
    };
    let ratios = SplitRatios::parse(&job.ratios)?;
    let split = ingest::split(&dataset, ratios, job.seed)?;
    log::info!(
        "{} users, {} items, {} interactions ({} noisy); train {} valid {} test {}",
        dataset.num_users(),
        dataset.num_items(),
        dataset.len(),
        dataset.noisy_count(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    for (name, part) in SPLIT_FILES.iter().zip([&split.train, &split.valid, &split.test]) {
        out.write(*name, |w| Ok(part.write_tsv(w)?))?;
    }
    out.write("users.tsv", |w| Ok(InteractionDataset::write_token_map(dataset.user_tokens(), w)?))?;
    out.write("items.tsv", |w| Ok(InteractionDataset::write_token_map(dataset.item_tokens(), w)?))?;
    Ok(inputs)
}

/// Reads the three split files and digests them.
pub fn load_split(dir: &Path) -> Result<(DataSplit, Vec<FileDigest>)> {
    let mut parts = Vec::new();
    let mut digests = Vec::new();
    for name in SPLIT_FILES {
        let path = dir.join(name);
        let file = File::open(&path).map_err(CliError::io(&path))?;
        let ds = InteractionDataset::read_tsv(BufReader::new(file))
            .map_err(|source| CliError::Input { path: path.clone(), source })?;
        digests.push(digest(&path, path.clone())?);
        parts.push(ds);
    }
    let test = parts.pop().expect("three parts");
    let valid = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    if valid.num_users() != train.num_users()
        || test.num_users() != train.num_users()
        || valid.num_items() != train.num_items()
        || test.num_items() != train.num_items()
    {
        return Err(CliError::Config {
            path: dir.to_path_buf(),
            message: "split files disagree on dimensions".into(),
        });
    }
    let sizes = (valid.len(), test.len());
    Ok((
        DataSplit {
            train,
            valid,
            test,
            split_seed: 0,
            unfiltered_sizes: sizes,
        },
        digests,
    ))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn metric_keys(ks: &[usize]) -> Vec<(RankingMetric, usize)> {
    [RankingMetric::Recall, RankingMetric::Ndcg]
        .into_iter()
        .flat_map(|m| ks.iter().map(move |&k| (m, k)))
        .collect()
}

fn summary_rows(ks: &[usize], reports: &[MetricsReport]) -> Vec<Vec<String>> {
    metric_keys(ks)
        .into_iter()
        .map(|(m, k)| {
            let vals: Vec<f64> = reports.iter().map(|r| r.get(m, k).unwrap_or(f64::NAN)).collect();
            let (mean, std) = mean_std(&vals);
            vec![m.to_string(), k.to_string(), fmt(mean), fmt(std), vals.len().to_string()]
        })
        .collect()
}

fn train(job: &TrainJob, out: &mut Outputs) -> Result<Vec<FileDigest>> {
    let (split, inputs) = load_split(&job.split)?;
    let ks = &job.train.eval_ks;
    let mut reports = Vec::new();
    let mut per_seed = Vec::new();
    let mut per_user = Vec::new();
    for &seed in &job.seeds {
        let cfg = crossdenoise_core::TrainConfig {
            seed,
            ..job.train.clone()
        };
        let outcome = trainer::train(&split, &cfg)?;
        let test = trainer::evaluate_test(&outcome.model, &split, ks)?;
        log::info!(
            "seed {seed}: best epoch {} of {}, test {}@{} = {:.4}",
            outcome.best_epoch,
            outcome.reports.len(),
            cfg.selection_metric,
            cfg.selection_k,
            test.get(cfg.selection_metric, cfg.selection_k).unwrap_or(f64::NAN)
        );
        let dir = PathBuf::from(format!("seed-{seed}"));
        out.write(dir.join("model.bin"), |w| Ok(outcome.model.save(w)?))?;
        out.write(dir.join("epochs.csv"), |w| {
            Ok(write_epoch_csv(w, &outcome.reports, cfg.selection_k, job.timings)?)
        })?;
        out.write(dir.join("metrics.csv"), |w| Ok(test.write_csv(w)?))?;
        if job.dump_weights {
            out.write(dir.join("weights.tsv"), |w| Ok(outcome.final_weights.write_tsv(w)?))?;
        }
        for (m, k) in metric_keys(ks) {
            per_seed.push(vec![
                seed.to_string(),
                outcome.best_epoch.to_string(),
                outcome.reports.len().to_string(),
                m.to_string(),
                k.to_string(),
                fmt(test.get(m, k).unwrap_or(f64::NAN)),
            ]);
        }
        for (ki, k) in test.ks.iter().enumerate() {
            for (j, u) in test.users.iter().enumerate() {
                per_user.push(vec![seed.to_string(), u.to_string(), "recall".into(), k.to_string(), fmt(test.per_user_recall[ki][j])]);
                per_user.push(vec![seed.to_string(), u.to_string(), "ndcg".into(), k.to_string(), fmt(test.per_user_ndcg[ki][j])]);
            }
        }
        reports.push(test);
    }
    out.csv("summary.csv", &["metric", "K", "mean", "std", "seeds"], &summary_rows(ks, &reports))?;
    out.csv(
        "per_seed.csv",
        &["seed", "best_epoch", "epochs", "metric", "K", "value"],
        &per_seed,
    )?;
    out.csv("per_user.csv", &["seed", "user", "metric", "K", "value"], &per_user)?;
    Ok(inputs)
}

fn components_flags(c: Components) -> [String; 3] {
    [c.base, c.item, c.user].map(|on| if on { "1".to_string() } else { "0".to_string() })
}

fn ablate(job: &AblateJob, out: &mut Outputs) -> Result<Vec<FileDigest>> {
    let (split, inputs) = load_split(&job.split)?;
    let ks = &job.train.eval_ks;
    let rows = trainer::ablate(&split, &job.train, &job.grid, &job.seeds)?;
    let keys = metric_keys(ks);
    let mut header: Vec<String> = vec!["BW".into(), "IF".into(), "UF".into()];
    header.extend(keys.iter().map(|(m, k)| format!("{m}@{k}")));
    let mut table = Vec::new();
    let mut seeds = Vec::new();
    for row in &rows {
        let mut line: Vec<String> = components_flags(row.components).to_vec();
        line.extend(keys.iter().map(|&(m, k)| fmt(row.mean(m, k).unwrap_or(f64::NAN))));
        table.push(line);
        for (s, report) in row.seeds.iter().zip(&row.test) {
            for &(m, k) in &keys {
                let mut r = components_flags(row.components).to_vec();
                r.extend([s.to_string(), m.to_string(), k.to_string(), fmt(report.get(m, k).unwrap_or(f64::NAN))]);
                seeds.push(r);
            }
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("ablation.csv", &header_refs, &table)?;
    out.csv("ablation_seeds.csv", &["BW", "IF", "UF", "seed", "metric", "K", "value"], &seeds)?;
    Ok(inputs)
}

fn sweep(job: &SweepJob, out: &mut Outputs) -> Result<Vec<FileDigest>> {
    let (split, inputs) = load_split(&job.split)?;
    let title = format!(
        "{} {}@{} ({} seeds)",
        job.train.model,
        job.train.selection_metric,
        job.train.selection_k,
        job.seeds.len()
    );
    let mut verdicts: Vec<HessianVerdict> = Vec::new();
    if job.stencil.is_empty() {
        let surface = landscape::sweep(&split, &job.train, &job.alphas, &job.betas, &job.seeds)?;
        report_failures(&surface);
        out.write("surface.csv", |w| Ok(surface.write_csv(w)?))?;
        out.write("surface.svg", |w| Ok(surface.write_svg(w, &title)?))?;
        verdicts = surface.verdicts();
    } else {
        for (k, [a, b]) in job.stencil.iter().enumerate() {
            let (xs, ys) = landscape::stencil_axes((*a, *b), (job.step, job.step));
            let surface = landscape::sweep(&split, &job.train, &xs, &ys, &job.seeds)?;
            report_failures(&surface);
            out.write(format!("stencil-{k}.csv"), |w| Ok(surface.write_csv(w)?))?;
            match surface.neighborhood(1, 1) {
                Some(block) => verdicts.push(landscape::hessian_concavity((*a, *b), &block, job.step, job.step)?),
                None => log::warn!("stencil around ({a}, {b}) has missing cells; no verdict"),
            }
        }
    }
    out.write("verdicts.csv", |w| Ok(write_verdicts_csv(w, &verdicts)?))?;
    Ok(inputs)
}

fn report_failures(surface: &PerformanceSurface) {
    for (a, row) in surface.cells.iter().enumerate() {
        for (b, cell) in row.iter().enumerate() {
            if let landscape::Cell::Failed(msg) = cell {
                log::warn!("alpha={} beta={} failed: {msg}", surface.alphas[a], surface.betas[b]);
            }
        }
    }
}
