//! Rating ingestion, binarization, splitting and negative sampling.
//!
//! Also hosts a synthetic generator with exact ground-truth noise flags, used
//! to exercise the whole pipeline at desk scale.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_distr::{Normal, StandardNormal};
use rustc_hash::FxHashSet;

use crate::error::{contract, Error, Result};
use crate::seed::{rng_for, Purpose};

/// One explicit rating as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRating {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delimiter(pub u8);

impl Default for Delimiter {
    fn default() -> Self {
        Delimiter(b'\t')
    }
}

impl Delimiter {
    pub const TAB: Delimiter = Delimiter(b'\t');
    pub const COMMA: Delimiter = Delimiter(b',');

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tab" | "\\t" | "\t" => Ok(Self::TAB),
            "comma" | "," => Ok(Self::COMMA),
            other if other.len() == 1 => Ok(Delimiter(other.as_bytes()[0])),
            other => Err(contract(format!("unsupported delimiter {other:?}"))),
        }
    }
}

/// Parses `user<d>item<d>rating[<d>timestamp]` lines. `#` lines and blank lines
/// are skipped; line numbers in errors are 1-based physical lines.
pub fn parse_ratings<R: BufRead>(source: R, delimiter: Delimiter) -> Result<Vec<RawRating>> {
    let delim = delimiter.0 as char;
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(delim).map(str::trim).collect();
        if cols.len() != 3 && cols.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 4 columns, found {}", cols.len()),
            });
        }
        let rating: f64 = cols[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("rating {:?} is not a number", cols[2]),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("rating {:?} is not finite", cols[2]),
            });
        }
        let timestamp = match cols.get(3) {
            Some(ts) => Some(ts.parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("timestamp {ts:?} is not an integer"),
            })?),
            None => None,
        };
        out.push(RawRating {
            user: cols[0].to_string(),
            item: cols[1].to_string(),
            rating,
            timestamp,
        });
    }
    Ok(out)
}

/// An observed (user, item) pair. `noisy` marks a false positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub noisy: bool,
}

#[inline]
pub fn pair_key(user: u32, item: u32) -> u64 {
    ((user as u64) << 32) | item as u64
}

/// Binary implicit-feedback matrix in coordinate form.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    interactions: Vec<Interaction>,
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
}

impl InteractionDataset {
    /// Builds a dataset, checking index bounds and pair uniqueness. Tokens
    /// default to the decimal index when empty.
    pub fn new(
        num_users: usize,
        num_items: usize,
        interactions: Vec<Interaction>,
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
    ) -> Result<Self> {
        if num_users == 0 || num_items == 0 {
            return Err(contract("dataset needs at least one user and one item"));
        }
        if num_users > u32::MAX as usize || num_items > u32::MAX as usize {
            return Err(contract("dataset dimensions exceed u32 index space"));
        }
        let mut seen = FxHashSet::default();
        for it in &interactions {
            if it.user as usize >= num_users || it.item as usize >= num_items {
                return Err(contract(format!(
                    "interaction ({}, {}) outside {}x{}",
                    it.user, it.item, num_users, num_items
                )));
            }
            if !seen.insert(pair_key(it.user, it.item)) {
                return Err(contract(format!(
                    "duplicate interaction ({}, {})",
                    it.user, it.item
                )));
            }
        }
        let user_tokens = if user_tokens.is_empty() {
            (0..num_users).map(|u| u.to_string()).collect()
        } else {
            user_tokens
        };
        let item_tokens = if item_tokens.is_empty() {
            (0..num_items).map(|i| i.to_string()).collect()
        } else {
            item_tokens
        };
        if user_tokens.len() != num_users || item_tokens.len() != num_items {
            return Err(contract("token maps must cover every index"));
        }
        Ok(Self {
            num_users,
            num_items,
            interactions,
            user_tokens,
            item_tokens,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.user_tokens
    }

    pub fn item_tokens(&self) -> &[String] {
        &self.item_tokens
    }

    pub fn noisy_count(&self) -> usize {
        self.interactions.iter().filter(|it| it.noisy).count()
    }

    /// Same index space, different interaction subset.
    fn with_interactions(&self, interactions: Vec<Interaction>) -> Self {
        Self {
            num_users: self.num_users,
            num_items: self.num_items,
            interactions,
            user_tokens: self.user_tokens.clone(),
            item_tokens: self.item_tokens.clone(),
        }
    }

    pub fn pair_set(&self) -> FxHashSet<u64> {
        self.interactions
            .iter()
            .map(|it| pair_key(it.user, it.item))
            .collect()
    }

    /// Item lists per user, in interaction order.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut rows = vec![Vec::new(); self.num_users];
        for it in &self.interactions {
            rows[it.user as usize].push(it.item);
        }
        rows
    }

    /// Writes the `M<TAB>N` header followed by `u<TAB>i<TAB>flag` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}\t{}", self.num_users, self.num_items)?;
        for it in &self.interactions {
            writeln!(out, "{}\t{}\t{}", it.user, it.item, it.noisy as u8)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l?,
            None => return Err(Error::EmptyInput("dataset file has no header")),
        };
        let dims: Vec<&str> = header.trim().split('\t').collect();
        let parse_dim = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: 1,
                message: format!("bad dimension {s:?}"),
            })
        };
        if dims.len() != 2 {
            return Err(Error::Parse {
                line: 1,
                message: "header must be M<TAB>N".into(),
            });
        }
        let (m, n) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
        let mut interactions = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                line: idx + 1,
                message,
            };
            let cols: Vec<&str> = line.trim().split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(format!("expected 3 columns, found {}", cols.len())));
            }
            let user = cols[0].parse().map_err(|_| bad("bad user index".into()))?;
            let item = cols[1].parse().map_err(|_| bad("bad item index".into()))?;
            let noisy = match cols[2] {
                "0" => false,
                "1" => true,
                f => return Err(bad(format!("flag {f:?} is not 0/1"))),
            };
            interactions.push(Interaction { user, item, noisy });
        }
        Self::new(m, n, interactions, Vec::new(), Vec::new())
    }

    /// Tab-separated `index<TAB>token` lines for the user or item map.
    pub fn write_token_map<W: Write>(tokens: &[String], mut out: W) -> Result<()> {
        for (idx, tok) in tokens.iter().enumerate() {
            writeln!(out, "{idx}\t{tok}")?;
        }
        Ok(())
    }
}

/// Turns explicit ratings into implicit interactions; ratings at or below
/// `noise_threshold` become flagged false positives.
pub fn binarize(ratings: &[RawRating], noise_threshold: f64) -> Result<InteractionDataset> {
    if ratings.is_empty() {
        return Err(Error::EmptyInput("no ratings to binarize"));
    }
    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    let mut position: HashMap<u64, usize> = HashMap::new();
    let mut interactions: Vec<Interaction> = Vec::new();

    for r in ratings {
        let u = *user_index.entry(&r.user).or_insert_with(|| {
            user_tokens.push(r.user.clone());
            (user_tokens.len() - 1) as u32
        });
        let i = *item_index.entry(&r.item).or_insert_with(|| {
            item_tokens.push(r.item.clone());
            (item_tokens.len() - 1) as u32
        });
        let it = Interaction {
            user: u,
            item: i,
            noisy: r.rating <= noise_threshold,
        };
        // A repeated pair keeps its first position but takes the latest rating.
        match position.get(&pair_key(u, i)) {
            Some(&p) => interactions[p] = it,
            None => {
                position.insert(pair_key(u, i), interactions.len());
                interactions.push(it);
            }
        }
    }
    InteractionDataset::new(
        user_tokens.len(),
        item_tokens.len(),
        interactions,
        user_tokens,
        item_tokens,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatios {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 8,
            valid: 1,
            test: 1,
        }
    }
}

impl SplitRatios {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split([':', ','])
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| contract(format!("bad split ratios {s:?}")))?;
        match parts.as_slice() {
            &[train, valid, test] if train + valid + test > 0 && train > 0 => {
                Ok(Self { train, valid, test })
            }
            _ => Err(contract(format!("split ratios {s:?} must be train:valid:test"))),
        }
    }
}

impl std::fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.valid, self.test)
    }
}

/// Train/valid/test partition. Valid and test keep only true positives.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: InteractionDataset,
    pub valid: InteractionDataset,
    pub test: InteractionDataset,
    pub split_seed: u64,
    /// Sizes of valid and test before the true-positive filter.
    pub unfiltered_sizes: (usize, usize),
}

/// Seeded global shuffle then a count-based partition. Train gets
/// `floor(n * train / total)`, valid `floor(n * valid / total)`, test the rest.
pub fn split(ds: &InteractionDataset, ratios: SplitRatios, seed: u64) -> Result<DataSplit> {
    if ds.len() < 10 {
        return Err(contract(format!(
            "split needs at least 10 interactions, got {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng_for(seed, Purpose::Split, 0));

    let n = ds.len();
    let total = (ratios.train + ratios.valid + ratios.test) as usize;
    let n_train = n * ratios.train as usize / total;
    let n_valid = n * ratios.valid as usize / total;

    let pick = |range: std::ops::Range<usize>| -> Vec<Interaction> {
        order[range].iter().map(|&k| ds.interactions[k]).collect()
    };
    let train = pick(0..n_train);
    let valid_all = pick(n_train..n_train + n_valid);
    let test_all = pick(n_train + n_valid..n);
    let unfiltered_sizes = (valid_all.len(), test_all.len());
    let clean = |v: Vec<Interaction>| v.into_iter().filter(|it| !it.noisy).collect();

    Ok(DataSplit {
        train: ds.with_interactions(train),
        valid: ds.with_interactions(clean(valid_all)),
        test: ds.with_interactions(clean(test_all)),
        split_seed: seed,
        unfiltered_sizes,
    })
}

/// Sampled unobserved pairs for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub samples: Vec<(u32, u32)>,
    pub ratio: usize,
    pub epoch_seed: u64,
}

/// Rejection sampler over the complement of the train interactions.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    observed: FxHashSet<u64>,
    num_users: usize,
    num_items: usize,
    num_positives: usize,
}

impl NegativeSampler {
    pub fn new(train: &InteractionDataset) -> Self {
        Self {
            observed: train.pair_set(),
            num_users: train.num_users(),
            num_items: train.num_items(),
            num_positives: train.len(),
        }
    }

    pub fn is_observed(&self, user: u32, item: u32) -> bool {
        self.observed.contains(&pair_key(user, item))
    }

    /// Draws `k * |train|` pairs uniformly (with replacement) from the
    /// unobserved set, from the stream keyed by `(seed, epoch)`.
    pub fn sample(&self, k: usize, seed: u64, epoch: u64) -> Result<NegativeSet> {
        if k == 0 {
            return Err(contract("negative ratio must be positive"));
        }
        let cells = self.num_users as u128 * self.num_items as u128;
        if cells <= self.observed.len() as u128 {
            return Err(Error::Density {
                requested: k * self.num_positives,
                accepted: 0,
                attempts: 0,
            });
        }
        let requested = k * self.num_positives;
        let budget = requested.saturating_mul(100);
        let mut rng = rng_for(seed, Purpose::Negatives, epoch);
        let mut samples = Vec::with_capacity(requested);
        let mut attempts = 0usize;
        while samples.len() < requested {
            if attempts >= budget {
                return Err(Error::Density {
                    requested,
                    accepted: samples.len(),
                    attempts,
                });
            }
            attempts += 1;
            let u = rng.random_range(0..self.num_users) as u32;
            let i = rng.random_range(0..self.num_items) as u32;
            if !self.is_observed(u, i) {
                samples.push((u, i));
            }
        }
        Ok(NegativeSet {
            samples,
            ratio: k,
            epoch_seed: epoch,
        })
    }
}

pub fn sample_negatives(
    train: &InteractionDataset,
    k: usize,
    seed: u64,
    epoch: u64,
) -> Result<NegativeSet> {
    NegativeSampler::new(train).sample(k, seed, epoch)
}

/// Knobs for [`synth_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    /// Share of the final interactions that are injected false positives.
    pub noise_fraction: f64,
    pub seed: u64,
    /// Share of all (user, item) cells that become clean positives.
    pub density: f64,
    /// Log-normal spread of per-user and per-item noise propensity. Zero
    /// spreads noise uniformly.
    pub propensity_spread: f64,
}

impl SynthConfig {
    pub fn new(
        num_users: usize,
        num_items: usize,
        latent_dim: usize,
        noise_fraction: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_users,
            num_items,
            latent_dim,
            noise_fraction,
            seed,
            density: 0.05,
            propensity_spread: 1.0,
        }
    }
}

/// Latent-factor ground truth: the highest-affinity cells become clean
/// positives, then randomly chosen unobserved cells are flipped into noisy
/// positives until they make up `noise_fraction` of all interactions.
/// Interactions come out sorted by (user, item).
pub fn synth_generate(cfg: &SynthConfig) -> Result<InteractionDataset> {
    let (m, n, l) = (cfg.num_users, cfg.num_items, cfg.latent_dim);
    if m == 0 || n == 0 || l == 0 {
        return Err(contract("synthetic dimensions must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.noise_fraction) {
        return Err(contract("noise_fraction must lie in [0, 1)"));
    }
    if !(cfg.density > 0.0 && cfg.density < 1.0) {
        return Err(contract("density must lie in (0, 1)"));
    }
    let mut rng = rng_for(cfg.seed, Purpose::Synth, 0);
    let users: Vec<f64> = (0..m * l).map(|_| rng.sample(StandardNormal)).collect();
    let items: Vec<f64> = (0..n * l).map(|_| rng.sample(StandardNormal)).collect();

    let cells = m * n;
    let n_clean = ((cfg.density * cells as f64).round() as usize).clamp(1, cells);
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(cells);
    for u in 0..m {
        let pu = &users[u * l..(u + 1) * l];
        for i in 0..n {
            let qi = &items[i * l..(i + 1) * l];
            let s: f64 = pu.iter().zip(qi).map(|(a, b)| a * b).sum();
            scored.push((s, (u * n + i) as u32));
        }
    }
    let by_score_desc = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n_clean < cells {
        scored.select_nth_unstable_by(n_clean, by_score_desc);
    }
    let mut positive = vec![false; cells];
    for &(_, cell) in &scored[..n_clean] {
        positive[cell as usize] = true;
    }

    let f = cfg.noise_fraction;
    let n_noisy = ((n_clean as f64 * f / (1.0 - f)).round() as usize).min(cells - n_clean);
    let mut noisy = vec![false; cells];
    if n_noisy > 0 {
        let spread = Normal::new(0.0, cfg.propensity_spread.max(0.0))
            .map_err(|e| contract(e.to_string()))?;
        let user_prop: Vec<f64> = (0..m).map(|_| rng.sample(spread).exp()).collect();
        let item_prop: Vec<f64> = (0..n).map(|_| rng.sample(spread).exp()).collect();
        let pick_user = WeightedIndex::new(&user_prop).map_err(|e| contract(e.to_string()))?;
        let pick_item = WeightedIndex::new(&item_prop).map_err(|e| contract(e.to_string()))?;
        let mut placed = 0;
        let mut attempts = 0usize;
        let budget = n_noisy * 200;
        while placed < n_noisy && attempts < budget {
            attempts += 1;
            let cell = pick_user.sample(&mut rng) * n + pick_item.sample(&mut rng);
            if !positive[cell] && !noisy[cell] {
                noisy[cell] = true;
                placed += 1;
            }
        }
        // Propensity-weighted draws can stall on heavily skewed small grids;
        // finish with a uniform pass over the remaining free cells.
        if placed < n_noisy {
            let mut free: Vec<usize> = (0..cells).filter(|&c| !positive[c] && !noisy[c]).collect();
            free.shuffle(&mut rng);
            for c in free.into_iter().take(n_noisy - placed) {
                noisy[c] = true;
            }
        }
    }

    let interactions = (0..cells)
        .filter(|&c| positive[c] || noisy[c])
        .map(|c| Interaction {
            user: (c / n) as u32,
            item: (c % n) as u32,
            noisy: noisy[c],
        })
        .collect();
    InteractionDataset::new(m, n, interactions, Vec::new(), Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rr(u: &str, i: &str, r: f64) -> RawRating {
        RawRating {
            user: u.into(),
            item: i.into(),
            rating: r,
            timestamp: None,
        }
    }

    #[test]
    fn parses_tab_line_with_timestamp() {
        let got = parse_ratings("1\t42\t5\t964982703\n".as_bytes(), Delimiter::TAB).unwrap();
        assert_eq!(
            got,
            vec![RawRating {
                user: "1".into(),
                item: "42".into(),
                rating: 5.0,
                timestamp: Some(964982703)
            }]
        );
    }

    #[test]
    fn non_numeric_rating_reports_line() {
        let err = parse_ratings("1,42,abc\n".as_bytes(), Delimiter::COMMA).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let err = parse_ratings("1\t2\t3\n1\t2\n".as_bytes(), Delimiter::TAB).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn comments_are_skipped() {
        let src = "# header\n1\t1\t4\n2\t1\t2\n";
        assert_eq!(parse_ratings(src.as_bytes(), Delimiter::TAB).unwrap().len(), 2);
        assert!(parse_ratings("".as_bytes(), Delimiter::TAB).unwrap().is_empty());
    }

    #[test]
    fn binarize_flags_at_threshold() {
        let ds = binarize(&[rr("a", "x", 4.0), rr("a", "y", 2.0), rr("b", "x", 3.0)], 3.0).unwrap();
        let flags: Vec<bool> = ds.interactions().iter().map(|it| it.noisy).collect();
        assert_eq!(flags, vec![false, true, true]);
        assert_eq!((ds.num_users(), ds.num_items()), (2, 2));
        assert_eq!(ds.user_tokens(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn binarize_keeps_last_duplicate() {
        let ds = binarize(&[rr("a", "x", 5.0), rr("b", "y", 5.0), rr("a", "x", 1.0)], 3.0).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.interactions()[0].noisy);
        assert!(binarize(&[], 3.0).is_err());
    }

    #[test]
    fn ten_interactions_split_eight_one_one() {
        let inter = (0..10)
            .map(|k| Interaction {
                user: k,
                item: 0,
                noisy: false,
            })
            .collect();
        let ds = InteractionDataset::new(10, 1, inter, vec![], vec![]).unwrap();
        let s = split(&ds, SplitRatios::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_filters_noise_from_valid_and_test() {
        // 100 interactions, every fifth noisy.
        let inter = (0..100)
            .map(|k| Interaction {
                user: k / 10,
                item: k % 10,
                noisy: k % 5 == 0,
            })
            .collect();
        let ds = InteractionDataset::new(10, 10, inter, vec![], vec![]).unwrap();
        let s = split(&ds, SplitRatios::default(), 11).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.unfiltered_sizes, (10, 10));
        assert!(s.test.len() <= 10 && s.valid.len() <= 10);
        assert_eq!(s.test.noisy_count(), 0);
        assert_eq!(s.valid.noisy_count(), 0);
        assert_eq!(s, split(&ds, SplitRatios::default(), 11).unwrap());
    }

    #[test]
    fn single_free_cell_is_sampled_repeatedly() {
        let inter = vec![
            Interaction { user: 0, item: 0, noisy: false },
            Interaction { user: 0, item: 1, noisy: false },
            Interaction { user: 1, item: 0, noisy: false },
        ];
        let ds = InteractionDataset::new(2, 2, inter, vec![], vec![]).unwrap();
        let neg = sample_negatives(&ds, 1, 5, 1).unwrap();
        assert_eq!(neg.samples, vec![(1, 1); 3]);
    }

    #[test]
    fn full_matrix_is_a_density_error() {
        let inter = (0..4)
            .map(|c| Interaction { user: c / 2, item: c % 2, noisy: false })
            .collect();
        let ds = InteractionDataset::new(2, 2, inter, vec![], vec![]).unwrap();
        assert!(matches!(sample_negatives(&ds, 1, 0, 0), Err(Error::Density { .. })));
    }

    #[test]
    fn synth_noise_fraction_is_hit() {
        let clean = synth_generate(&SynthConfig::new(60, 50, 4, 0.0, 1)).unwrap();
        assert_eq!(clean.noisy_count(), 0);
        let cfg = SynthConfig::new(200, 120, 8, 0.3, 9);
        let ds = synth_generate(&cfg).unwrap();
        let frac = ds.noisy_count() as f64 / ds.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "noise fraction {frac}");
        assert_eq!(ds, synth_generate(&cfg).unwrap());
    }

    #[test]
    fn tsv_round_trip() {
        let ds = synth_generate(&SynthConfig::new(20, 15, 3, 0.2, 4)).unwrap();
        let mut buf = Vec::new();
        ds.write_tsv(&mut buf).unwrap();
        let back = InteractionDataset::read_tsv(buf.as_slice()).unwrap();
        assert_eq!(back.interactions(), ds.interactions());
        assert_eq!((back.num_users(), back.num_items()), (20, 15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn split_is_a_disjoint_partition(seed in any::<u64>(), m in 4usize..12, n in 4usize..12) {
            let ds = synth_generate(&SynthConfig { density: 0.3, ..SynthConfig::new(m, n, 2, 0.25, seed) }).unwrap();
            prop_assume!(ds.len() >= 10);
            let s = split(&ds, SplitRatios::default(), seed ^ 1).unwrap();
            let (v_all, t_all) = s.unfiltered_sizes;
            prop_assert_eq!(s.train.len() + v_all + t_all, ds.len());
            let mut all = s.train.pair_set();
            for it in s.valid.interactions().iter().chain(s.test.interactions()) {
                prop_assert!(all.insert(pair_key(it.user, it.item)));
            }
        }

        #[test]
        fn negatives_never_hit_train(seed in any::<u64>(), epoch in 0u64..50, k in 1usize..4) {
            let ds = synth_generate(&SynthConfig { density: 0.2, ..SynthConfig::new(12, 9, 2, 0.2, seed) }).unwrap();
            let neg = sample_negatives(&ds, k, seed, epoch).unwrap();
            let observed = ds.pair_set();
            prop_assert_eq!(neg.samples.len(), k * ds.len());
            for &(u, i) in &neg.samples {
                prop_assert!(!observed.contains(&pair_key(u, i)));
            }
            prop_assert_eq!(neg, sample_negatives(&ds, k, seed, epoch).unwrap());
        }
    }
}
