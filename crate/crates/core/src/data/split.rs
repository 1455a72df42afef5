//! Seeded (optionally stratified) train/validation/test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::series::{IrregularSeries, Label};
use crate::error::{Result, TadaError};

/// Class used for stratification: the sequence label, or the most frequent
/// step label (ties to the smallest class id).
pub fn stratum(series: &IrregularSeries) -> usize {
    match &series.label {
        Label::Sequence(c) => *c,
        Label::Step(labels) => {
            let n = labels.iter().max().map_or(0, |m| m + 1);
            let mut counts = vec![0usize; n];
            labels.iter().for_each(|&l| counts[l] += 1);
            counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(c, _)| c)
        }
    }
}

/// Split sizes by largest remainder so they always sum to `n`.
fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            rest -= 1;
        }
    }
    [sizes[0], sizes[1], sizes[2]]
}

/// Partitions `dataset` into (train, val, test) by `ratios`.
///
/// With `stratify`, the samples of each class are shuffled and cut at the
/// cumulative ratios by within-class quantile, so every split holds its share of
/// each class up to one sample; split totals can then differ from the
/// unstratified sizes by up to one sample per class.
pub fn split_dataset(
    dataset: &[IrregularSeries],
    ratios: [f64; 3],
    seed: u64,
    stratify: bool,
) -> Result<(
    Vec<IrregularSeries>,
    Vec<IrregularSeries>,
    Vec<IrregularSeries>,
)> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(TadaError::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !stratify {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = split_sizes(dataset.len(), ratios);
        let pick = |range: &[usize]| {
            range
                .iter()
                .map(|&i| dataset[i].clone())
                .collect::<Vec<_>>()
        };
        return Ok((
            pick(&idx[..n_train]),
            pick(&idx[n_train..n_train + n_val]),
            pick(&idx[n_train + n_val..]),
        ));
    }
    let n_splits = ratios.iter().filter(|r| **r > 0.0).count();
    let n_classes = dataset.iter().map(stratum).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in dataset.iter().enumerate() {
        by_class[stratum(s)].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < n_splits {
            return Err(TadaError::Stratification(format!(
                "class {c} has {} samples for {n_splits} splits",
                members.len()
            )));
        }
    }
    let bounds = [ratios[0], ratios[0] + ratios[1]];
    let mut keyed: [Vec<(f64, usize, usize)>; 3] = Default::default();
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            let q = (rank as f64 + 0.5) / n;
            let split = if q < bounds[0] {
                0
            } else if q < bounds[1] {
                1
            } else {
                2
            };
            keyed[split].push((q, c, i));
        }
    }
    let [train, val, test] = keyed.map(|mut part| {
        part.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        part.into_iter()
            .map(|(_, _, i)| dataset[i].clone())
            .collect::<Vec<_>>()
    });
    Ok((train, val, test))
}
