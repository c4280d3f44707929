//! The reweighted training loop.
//!
//! Each epoch draws fresh negatives, shuffles observed and sampled pairs,
//! optimizes the weighted BCE batch by batch while recording every sample's
//! raw loss, and then, as a barrier before the next epoch, recomputes the
//! weight table from those losses. Validation on the clean validation split
//! drives early stopping; the best epoch's parameters are returned.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::backbones::{BatchContext, Corruption, Model, ModelKind, Sample, UserRows};
use crate::error::{contract, Error, Result};
use crate::ingest::{pair_key, DataSplit, NegativeSampler};
use crate::metrics::{self, MetricsReport, NoiseDiagnostics, RankingMetric};
use crate::neural::{AdamState, Parameters};
use crate::seed::{rng_for, Purpose};
use crate::weighting::{
    epoch_end_update, Components, EntityLossStats, LossRecordSet, UpdateConfig,
    WeightStrategyConfig, WeightTable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub negative_ratio: usize,
    pub embedding_dim: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub weighting: WeightStrategyConfig,
    pub components: Components,
    pub weight_decay: f64,
    /// CDAE input dropout rate.
    pub corruption_rate: f64,
    pub selection_metric: RankingMetric,
    pub selection_k: usize,
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Gmf,
            alpha: 1.0,
            beta: 2.0,
            lr: 1e-3,
            batch_size: 2048,
            negative_ratio: 1,
            embedding_dim: 32,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            weighting: WeightStrategyConfig::default(),
            components: Components::ALL,
            weight_decay: 0.0,
            corruption_rate: 0.5,
            selection_metric: RankingMetric::Recall,
            selection_k: 50,
            eval_ks: metrics::DEFAULT_KS.to_vec(),
        }
    }
}

impl TrainConfig {
    /// Plain training: every weight is 1.
    pub fn vanilla() -> Self {
        Self {
            weighting: WeightStrategyConfig::uniform(),
            components: Components::NONE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha <= self.beta && self.beta.is_finite()) {
            return Err(contract(format!(
                "need 0 <= alpha <= beta, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.batch_size == 0 || self.patience == 0 || self.negative_ratio == 0 || self.embedding_dim == 0 {
            return Err(contract("batch_size, patience, negative_ratio and embedding_dim must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(contract("lr must be positive and weight_decay nonnegative"));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(contract("corruption_rate must lie in [0, 1)"));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) || !self.eval_ks.contains(&self.selection_k) {
            return Err(contract("eval_ks must be positive and include selection_k"));
        }
        self.weighting.validate()
    }

    fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            alpha: self.alpha,
            beta: self.beta,
            strategy: self.weighting,
            components: self.components,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean unweighted BCE over every sample of the epoch.
    pub train_loss: f64,
    pub eval_ks: Vec<usize>,
    pub valid_recall: Vec<f64>,
    pub valid_ndcg: Vec<f64>,
    pub selection_score: f64,
    /// Loss and the weight in force this epoch, clean vs. noisy positives.
    pub diagnostics: NoiseDiagnostics,
    pub seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `epoch,loss,recall@k,ndcg@k,tp_loss,fp_loss,tp_weight,fp_weight`
/// (plus `seconds` when `with_seconds`), with `k` the selection cutoff.
/// Absent group means are written as empty fields.
pub fn write_epoch_csv<W: Write>(
    mut out: W,
    reports: &[EpochReport],
    k: usize,
    with_seconds: bool,
) -> Result<()> {
    write!(out, "epoch,loss,recall{k},ndcg{k},tp_loss,fp_loss,tp_weight,fp_weight")?;
    if with_seconds {
        write!(out, ",seconds")?;
    }
    writeln!(out)?;
    for r in reports {
        let pos = r.eval_ks.iter().position(|&x| x == k);
        let recall = pos.map(|p| r.valid_recall[p]);
        let ndcg = pos.map(|p| r.valid_ndcg[p]);
        let d = &r.diagnostics;
        write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(recall),
            opt(ndcg),
            opt(d.tp_loss),
            opt(d.fp_loss),
            opt(d.tp_weight),
            opt(d.fp_weight)
        )?;
        if with_seconds {
            write!(out, ",{}", r.seconds)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Patience counter over a maximized validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best_score: f64,
    best_epoch: usize,
    since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Records an epoch's score; returns `true` when it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best_score {
            self.best_score = score;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_score(&self) -> f64 {
        self.best_score
    }
}

/// Sample order for one epoch: observed pairs first, then negatives, permuted
/// by the `(seed, epoch)` shuffle stream.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(seed, Purpose::Shuffle, epoch));
    order
}

/// Stepwise access to the training loop; [`train`] drives it to completion.
pub struct Trainer<'a> {
    split: &'a DataSplit,
    cfg: TrainConfig,
    model: Model,
    grad: Model,
    adam: AdamState,
    sampler: NegativeSampler,
    rows: UserRows,
    weights: WeightTable,
    stats: EntityLossStats,
    records: LossRecordSet,
    noise_flags: FxHashMap<u64, bool>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(split: &'a DataSplit, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if split.train.is_empty() {
            return Err(Error::EmptyInput("training split has no interactions"));
        }
        let (m, n) = (split.train.num_users(), split.train.num_items());
        let mut model = Model::init(cfg.model, m, n, cfg.embedding_dim, cfg.seed)?;
        model.set_corruption_rate(cfg.corruption_rate)?;
        let grad = model.zeros_like();
        let mut adam = AdamState::new(&model, cfg.lr);
        adam.weight_decay = cfg.weight_decay;
        let noise_flags = split
            .train
            .interactions()
            .iter()
            .map(|it| (pair_key(it.user, it.item), it.noisy))
            .collect();
        Ok(Self {
            split,
            cfg: cfg.clone(),
            model,
            grad,
            adam,
            sampler: NegativeSampler::new(&split.train),
            rows: UserRows::from_dataset(&split.train),
            weights: WeightTable::ones(),
            stats: EntityLossStats::new(m, n),
            records: LossRecordSet::with_capacity(split.train.len() * (1 + cfg.negative_ratio)),
            noise_flags,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// The table the next epoch will train with.
    pub fn weights(&self) -> &WeightTable {
        &self.weights
    }

    /// Losses recorded during the last completed epoch.
    pub fn records(&self) -> &LossRecordSet {
        &self.records
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    fn eval_context(&self) -> BatchContext<'_> {
        BatchContext {
            rows: Some(&self.rows),
            corruption: None,
        }
    }

    /// Metrics on the clean validation split, training items excluded.
    pub fn validate(&self) -> Result<MetricsReport> {
        metrics::evaluate(
            &self.model,
            &self.eval_context(),
            &self.split.valid,
            &[&self.split.train],
            &self.cfg.eval_ks,
        )
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let started = Instant::now();
        self.epoch += 1;
        let epoch = self.epoch as u64;
        let seed = self.cfg.seed;

        let negatives = self.sampler.sample(self.cfg.negative_ratio, seed, epoch)?;
        let mut samples: Vec<Sample> = Vec::with_capacity(self.split.train.len() + negatives.samples.len());
        samples.extend(self.split.train.interactions().iter().map(|it| Sample {
            user: it.user,
            item: it.item,
            label: 1.0,
        }));
        samples.extend(negatives.samples.iter().map(|&(user, item)| Sample {
            user,
            item,
            label: 0.0,
        }));
        let order = epoch_order(samples.len(), seed, epoch);

        self.stats.reset();
        self.records.clear();
        let mut corruption_rng = rng_for(seed, Purpose::Corruption, epoch);
        let mut loss_sum = 0.0;
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        let mut batch_weights = Vec::with_capacity(self.cfg.batch_size);
        for chunk in order.chunks(self.cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| samples[k]));
            batch_weights.clear();
            batch_weights.extend(batch.iter().map(|s| self.weights.get(s.user, s.item)));

            let corruption = match &self.model {
                Model::Cdae(c) => Some(Corruption::sample(
                    &self.rows,
                    batch.iter().map(|s| s.user),
                    c.corruption_rate,
                    &mut corruption_rng,
                )),
                _ => None,
            };
            let ctx = BatchContext {
                rows: Some(&self.rows),
                corruption: corruption.as_ref(),
            };
            self.grad.fill_zero();
            let out = self
                .model
                .weighted_batch_loss(&batch, &batch_weights, &ctx, &mut self.grad)?;
            self.adam.step(&mut self.model, &self.grad)?;
            for (s, &l) in batch.iter().zip(&out.per_sample) {
                self.records.push(s.user, s.item, l)?;
                self.stats.add(s.user, s.item, l)?;
                loss_sum += l;
            }
        }
        let train_loss = loss_sum / samples.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric {
                param: format!("epoch {epoch} training loss"),
            });
        }

        let diagnostics = metrics::tp_fp_diagnostics(&self.records, &self.weights, &self.noise_flags);

        // Barrier: nothing above read the table being built here.
        self.weights = if self.cfg.components.is_none() {
            WeightTable::ones()
        } else {
            let update = epoch_end_update(&self.records, &self.stats, &self.cfg.update_config())?;
            if let Some(fit) = &update.gmm {
                if !fit.converged {
                    log::warn!("epoch {epoch}: GMM stopped after {} iterations without converging", fit.iterations);
                }
            }
            update.table
        };

        let valid = self.validate()?;
        let selection_score = valid
            .get(self.cfg.selection_metric, self.cfg.selection_k)
            .ok_or_else(|| contract("selection cutoff missing from report"))?;
        Ok(EpochReport {
            epoch: self.epoch,
            train_loss,
            eval_ks: valid.ks.clone(),
            valid_recall: valid.recall,
            valid_ndcg: valid.ndcg,
            selection_score,
            diagnostics,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
    /// The table produced by the last epoch run.
    pub final_weights: WeightTable,
}

/// Runs up to `max_epochs` epochs with patience-based early stopping.
pub fn train(split: &DataSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(split, cfg)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = trainer.model().clone();
    let mut reports = Vec::new();
    let mut stopped_early = false;
    for _ in 0..cfg.max_epochs {
        let report = trainer.run_epoch()?;
        if stopper.observe(report.epoch, report.selection_score) {
            best = trainer.model().clone();
        }
        log::debug!(
            "epoch {} loss {:.5} valid {:.5}",
            report.epoch,
            report.train_loss,
            report.selection_score
        );
        reports.push(report);
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch: stopper.best_epoch(),
        best_score: stopper.best_score(),
        reports,
        stopped_early,
        final_weights: trainer.weights().clone(),
    })
}

/// Test-split metrics: train and validation interactions are excluded from
/// the candidates.
pub fn evaluate_test(model: &Model, split: &DataSplit, ks: &[usize]) -> Result<MetricsReport> {
    let rows = UserRows::from_dataset(&split.train);
    let ctx = BatchContext {
        rows: Some(&rows),
        corruption: None,
    };
    metrics::evaluate(model, &ctx, &split.test, &[&split.train, &split.valid], ks)
}

/// One ablation row: a component combination trained over shared seeds.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub components: Components,
    pub seeds: Vec<u64>,
    pub test: Vec<MetricsReport>,
    pub best_epochs: Vec<usize>,
}

impl AblationRow {
    pub fn mean(&self, metric: RankingMetric, k: usize) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.test.iter().map(|r| r.get(metric, k)).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Trains every component combination with every seed on the same split.
/// The combination with no components trains with all-ones weights.
pub fn ablate(
    split: &DataSplit,
    base: &TrainConfig,
    grid: &[Components],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&components| {
            let mut row = AblationRow {
                components,
                seeds: seeds.to_vec(),
                test: Vec::new(),
                best_epochs: Vec::new(),
            };
            for &seed in seeds {
                let cfg = TrainConfig {
                    components,
                    seed,
                    ..base.clone()
                };
                let outcome = train(split, &cfg)?;
                row.test.push(evaluate_test(&outcome.model, split, &cfg.eval_ks)?);
                row.best_epochs.push(outcome.best_epoch);
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{split, synth_generate, SplitRatios, SynthConfig};

    fn small_split(seed: u64) -> DataSplit {
        let ds = synth_generate(&SynthConfig::new(50, 40, 4, 0.3, seed)).unwrap();
        split(&ds, SplitRatios::default(), seed).unwrap()
    }

    fn quick(cfg: TrainConfig) -> TrainConfig {
        TrainConfig {
            embedding_dim: 8,
            batch_size: 64,
            lr: 1e-2,
            max_epochs: 6,
            eval_ks: vec![10, 50],
            selection_k: 10,
            ..cfg
        }
    }

    #[test]
    fn early_stopping_counts_patience() {
        let mut es = EarlyStopping::new(10);
        let mut stopped_at = None;
        for epoch in 1..=50 {
            es.observe(epoch, 1.0 / epoch as f64);
            if es.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(es.best_epoch(), 1);
        assert_eq!(stopped_at, Some(11));
    }

    #[test]
    fn early_stopping_tracks_argmax() {
        let mut es = EarlyStopping::new(3);
        for (e, s) in [0.1, 0.4, 0.3, 0.5, 0.2].iter().enumerate() {
            es.observe(e + 1, *s);
        }
        assert_eq!((es.best_epoch(), es.best_score()), (4, 0.5));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let s = small_split(1);
        for bad in [
            TrainConfig { alpha: 2.0, beta: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { selection_k: 7, ..TrainConfig::default() },
        ] {
            assert!(Trainer::new(&s, &bad).is_err());
        }
    }

    #[test]
    fn training_is_deterministic_for_every_backbone() {
        let s = small_split(2);
        for model in [ModelKind::Gmf, ModelKind::NeuMf, ModelKind::Cdae] {
            let cfg = quick(TrainConfig { model, max_epochs: 3, ..TrainConfig::default() });
            let a = train(&s, &cfg).unwrap();
            let b = train(&s, &cfg).unwrap();
            let strip = |r: &[EpochReport]| -> Vec<EpochReport> {
                r.iter().map(|e| EpochReport { seconds: 0.0, ..e.clone() }).collect()
            };
            assert_eq!(strip(&a.reports), strip(&b.reports), "{model}");
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn first_epoch_ignores_weighting_strategy() {
        let s = small_split(3);
        let base = quick(TrainConfig::vanilla());
        let mut t0 = Trainer::new(&s, &base).unwrap();
        t0.run_epoch().unwrap();
        for strategy in ["ecdf", "gmm", "topk", "linear"] {
            let cfg = quick(TrainConfig {
                weighting: WeightStrategyConfig {
                    strategy: strategy.parse().unwrap(),
                    ..Default::default()
                },
                components: Components::ALL,
                ..TrainConfig::default()
            });
            let mut t = Trainer::new(&s, &cfg).unwrap();
            t.run_epoch().unwrap();
            assert_eq!(t.model(), t0.model(), "{strategy}");
        }
    }

    #[test]
    fn unit_alpha_beta_with_uniform_matches_vanilla_bitwise() {
        let s = small_split(4);
        let vanilla = quick(TrainConfig::vanilla());
        let ones = quick(TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            weighting: WeightStrategyConfig::uniform(),
            components: Components::ALL,
            ..TrainConfig::default()
        });
        let (mut a, mut b) = (Trainer::new(&s, &vanilla).unwrap(), Trainer::new(&s, &ones).unwrap());
        for _ in 0..4 {
            a.run_epoch().unwrap();
            b.run_epoch().unwrap();
            assert_eq!(a.model().to_flat(), b.model().to_flat());
        }
    }

    #[test]
    fn best_snapshot_never_worse_than_earlier_epochs() {
        let s = small_split(5);
        let out = train(&s, &quick(TrainConfig { max_epochs: 8, ..TrainConfig::default() })).unwrap();
        let best = out.reports.iter().map(|r| r.selection_score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_score, best);
        assert_eq!(out.reports[out.best_epoch - 1].selection_score, best);
    }

    #[test]
    fn untrained_model_scores_like_random_ranking() {
        // With near-zero initial embeddings every ranking is effectively
        // random; expected recall for a user is K / |candidates|.
        let ds = synth_generate(&SynthConfig::new(300, 200, 4, 0.0, 6)).unwrap();
        let s = split(&ds, SplitRatios::default(), 6).unwrap();
        let cfg = TrainConfig { eval_ks: vec![20], selection_k: 20, ..TrainConfig::default() };
        let trainer = Trainer::new(&s, &cfg).unwrap();
        let report = trainer.validate().unwrap();
        let train_rows = s.train.items_by_user();
        let expected: f64 = report
            .users
            .iter()
            .map(|&u| 20.0 / (200 - train_rows[u as usize].len()) as f64)
            .sum::<f64>()
            / report.users.len() as f64;
        let got = report.recall[0];
        assert!((got - expected).abs() < 0.05, "recall {got} vs random {expected}");
    }

    #[test]
    fn ablation_emits_one_row_per_combination() {
        let s = small_split(7);
        let cfg = quick(TrainConfig { max_epochs: 2, ..TrainConfig::default() });
        let rows = ablate(&s, &cfg, &Components::ablation_rows(), &[1]).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.test.len() == 1));
    }

    #[test]
    fn epoch_csv_has_expected_header() {
        let r = EpochReport {
            epoch: 1,
            train_loss: 0.5,
            eval_ks: vec![50],
            valid_recall: vec![0.25],
            valid_ndcg: vec![0.125],
            selection_score: 0.25,
            diagnostics: NoiseDiagnostics { tp_loss: Some(0.5), ..Default::default() },
            seconds: 1.5,
        };
        let mut buf = Vec::new();
        write_epoch_csv(&mut buf, &[r], 50, true).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,loss,recall50,ndcg50,tp_loss,fp_loss,tp_weight,fp_weight,seconds\n1,0.5,0.25,0.125,0.5,,,,1.5\n"
        );
    }
}
