use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetState, LabeledSample, Mask, Origin, Slice};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionFractions {
    /// Fraction of all slices held out for testing.
    pub test: f64,
    /// Fraction of the training pool used for validation.
    pub validation: f64,
    /// Fraction of the training pool that keeps its labels.
    pub labeled: f64,
}

impl Default for PartitionFractions {
    fn default() -> Self {
        Self {
            test: 0.2,
            validation: 0.1,
            labeled: 0.1,
        }
    }
}

impl PartitionFractions {
    /// Partition sizes `[test, validation, labeled, unlabeled]` for `n` slices.
    ///
    /// Test, validation and labeled counts are floored; the unlabeled
    /// partition takes the remainder of the training pool.
    pub fn sizes(&self, n: usize) -> [usize; 4] {
        let floor = |x: f64| (x + 1e-9).floor() as usize;
        let test = floor(n as f64 * self.test);
        let train = n - test;
        let validation = floor(train as f64 * self.validation);
        let labeled = floor(train as f64 * self.labeled);
        [test, validation, labeled, train - validation - labeled]
    }
}

/// Splits `samples` into test / validation / labeled / unlabeled partitions,
/// stratified by tumor presence. Each partition is sorted by slice id.
///
/// Tumor counts are assigned by rounding cumulative partition boundaries, so
/// every partition is within one slice of the global tumor ratio.
pub fn make_partition(samples: Vec<(Slice, Mask)>, fractions: PartitionFractions, seed: u64) -> Result<DatasetState> {
    for (name, f) in [
        ("test", fractions.test),
        ("validation", fractions.validation),
        ("labeled", fractions.labeled),
    ] {
        ensure!(f > 0.0 && f < 1.0, Config, "{name} fraction {f} must lie in (0, 1)");
    }
    ensure!(
        fractions.validation + fractions.labeled < 1.0,
        Config,
        "validation + labeled fractions must leave room for unlabeled slices"
    );
    let n = samples.len();
    let sizes = fractions.sizes(n);
    ensure!(
        sizes.iter().all(|s| *s >= 1),
        Config,
        "{n} slices cannot populate every partition (sizes {sizes:?})"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tumor, mut clean): (Vec<_>, Vec<_>) = samples.into_iter().partition(|(_, m)| !m.is_empty());
    // Sort first so the shuffle does not depend on input order.
    tumor.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    clean.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    tumor.shuffle(&mut rng);
    clean.shuffle(&mut rng);
    let n_tumor = tumor.len();

    let mut parts: Vec<Vec<(Slice, Mask)>> = Vec::with_capacity(4);
    let (mut tumor_iter, mut clean_iter) = (tumor.into_iter(), clean.into_iter());
    let (mut cum, mut cum_tumor) = (0usize, 0usize);
    for size in sizes {
        cum += size;
        let target = ((cum * n_tumor) as f64 / n as f64).round() as usize;
        let take_tumor = target.saturating_sub(cum_tumor).min(size);
        cum_tumor += take_tumor;
        let mut part: Vec<_> = tumor_iter.by_ref().take(take_tumor).collect();
        part.extend(clean_iter.by_ref().take(size - take_tumor));
        part.sort_by(|a, b| a.0.id.cmp(&b.0.id));
        parts.push(part);
    }
    debug_assert!(tumor_iter.next().is_none() && clean_iter.next().is_none());

    let to_labeled = |part: Vec<(Slice, Mask)>| -> Result<Vec<LabeledSample>> {
        part.into_iter()
            .map(|(mut s, m)| {
                s.has_tumor = !m.is_empty();
                LabeledSample::new(s, m, Origin::Original)
            })
            .collect()
    };
    let unlabeled_part = parts.pop().expect("four partitions");
    let labeled = to_labeled(parts.pop().expect("four partitions"))?;
    let validation = to_labeled(parts.pop().expect("four partitions"))?;
    let test = to_labeled(parts.pop().expect("four partitions"))?;
    let unlabeled = unlabeled_part.into_iter().map(|(s, _)| s).collect();
    let state = DatasetState {
        labeled,
        unlabeled,
        validation,
        test,
        iteration: 0,
    };
    state.check_disjoint()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::Array2;
    use std::collections::BTreeSet;

    fn corpus(n: usize, tumor_every: usize) -> Vec<(Slice, Mask)> {
        (0..n)
            .map(|i| {
                let mut m = Mask::zeros(2, 2);
                // `tumor_every` of every 5 slices carry a tumor.
                if i % 5 < tumor_every {
                    m.set(0, 0, true);
                }
                (Slice::new(format!("s{i:03}"), Array2::zeros((2, 2)), false).unwrap(), m)
            })
            .collect()
    }

    #[test]
    fn default_fractions_on_one_hundred_slices() {
        let state = make_partition(corpus(100, 4), PartitionFractions::default(), 1).unwrap();
        assert_eq!(state.test.len(), 20);
        assert_eq!(state.validation.len(), 8);
        assert_eq!(state.labeled.len(), 8);
        assert_eq!(state.unlabeled.len(), 64);
    }

    #[test]
    fn partition_is_a_disjoint_cover_and_deterministic() {
        let input = corpus(57, 4);
        let all: BTreeSet<String> = input.iter().map(|(s, _)| s.id.clone()).collect();
        let a = make_partition(input.clone(), PartitionFractions::default(), 9).unwrap();
        let b = make_partition(input, PartitionFractions::default(), 9).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<String> = a.labeled.iter().map(|s| s.slice.id.clone()).collect();
        ids.extend(a.unlabeled.iter().map(|s| s.id.clone()));
        ids.extend(a.validation.iter().map(|s| s.slice.id.clone()));
        ids.extend(a.test.iter().map(|s| s.slice.id.clone()));
        assert_eq!(ids.len(), all.len());
        assert_eq!(ids.into_iter().collect::<BTreeSet<_>>(), all);
        assert!(a.test.windows(2).all(|w| w[0].slice.id < w[1].slice.id));
    }

    #[test]
    fn stratification_keeps_tumor_ratio_within_one_slice() {
        for n in [100, 137, 500] {
            let state = make_partition(corpus(n, 4), PartitionFractions::default(), 3).unwrap();
            let check = |total: usize, tumors: usize| {
                let expected = total as f64 * 0.8;
                assert!((tumors as f64 - expected).abs() <= 1.0, "{tumors} of {total}");
            };
            let count = |v: &[LabeledSample]| v.iter().filter(|s| !s.mask.is_empty()).count();
            check(state.test.len(), count(&state.test));
            check(state.validation.len(), count(&state.validation));
            check(state.labeled.len(), count(&state.labeled));
            // Unlabeled slices keep their original order-independent ids, count via the corpus pattern.
            let tumor_ids: BTreeSet<String> = corpus(n, 4)
                .into_iter()
                .filter(|(_, m)| !m.is_empty())
                .map(|(s, _)| s.id)
                .collect();
            check(
                state.unlabeled.len(),
                state.unlabeled.iter().filter(|s| tumor_ids.contains(&s.id)).count(),
            );
        }
    }

    #[test]
    fn too_few_slices_is_a_config_error() {
        assert!(matches!(
            make_partition(corpus(5, 4), PartitionFractions::default(), 0),
            Err(Error::Config(_))
        ));
    }
}
