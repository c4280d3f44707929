//! Shared fixtures for the benchmarks.

use crossdenoise_core::ingest::{split, synth_generate, DataSplit, SplitRatios, SynthConfig};
use crossdenoise_core::weighting::{EntityLossStats, LossRecordSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `size` random losses over a square user/item grid of side `2 * sqrt(size)`.
pub fn loss_records(size: usize, seed: u64) -> (LossRecordSet, EntityLossStats) {
    let side = ((2.0 * (size as f64).sqrt()) as u32).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = LossRecordSet::with_capacity(size);
    for _ in 0..size {
        records
            .push(rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0.0..3.0))
            .expect("finite loss");
    }
    let mut stats = EntityLossStats::new(side as usize, side as usize);
    stats.accumulate(&records).expect("ids in range");
    (records, stats)
}

pub fn losses(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size).map(|_| rng.random_range(0.0..5.0)).collect()
}

pub fn synthetic_split(users: usize, items: usize, seed: u64) -> DataSplit {
    let ds = synth_generate(&SynthConfig::new(users, items, 8, 0.3, seed)).expect("valid synthetic config");
    split(&ds, SplitRatios::default(), seed).expect("enough interactions")
}
