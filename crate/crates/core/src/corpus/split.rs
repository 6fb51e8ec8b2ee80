use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Role};
use crate::error::{Error, Result};

/// Shuffle `corpus` with `seed` and cut it into train/validation/test parts
/// of the given fractions. The test part takes whatever rounding leaves.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidFractions(format!(
            "fractions must be non-negative, got ({ft}, {fv}, {fs})"
        )));
    }
    if ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(format!(
            "fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);

    let take = |idx: &[usize], role: Role| Corpus {
        examples: idx.iter().map(|&i| corpus.examples[i].clone()).collect(),
        class_names: corpus.class_names.clone(),
        role,
    };
    Ok((
        take(&order[..n_train], Role::Train),
        take(&order[n_train..n_train + n_val], Role::Validation),
        take(&order[n_train + n_val..], Role::Test),
    ))
}
