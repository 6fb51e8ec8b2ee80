//! Fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, Instance, Role, Vocab, RESERVED};
use crate::model::{initialize, ModelConfig, ModelSnapshot};

pub const WORDS: &[&str] = &[
    "great", "plot", "dull", "cast", "movie", "the", "!", "dragon", "lizard", "same",
];

/// An untrained model with non-trivial random parameters over [`WORDS`].
pub fn toy_model(hidden_dim: usize, seed: u64) -> ModelSnapshot {
    let vocab = Vocab::from_tokens(WORDS.iter().map(|w| w.to_string()));
    let config = ModelConfig {
        embedding_dim: 6,
        hidden_dim,
        num_classes: 2,
        seed,
        init_scale: 0.7,
        ..Default::default()
    };
    let mut m = initialize(&vocab, &config, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for b in &mut m.head.bias {
        *b = rng.random_range(-0.5..0.5);
    }
    if let Some(layer) = m.hidden.as_mut() {
        for b in &mut layer.bias {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    m
}

/// `n` random unpaired instances over the model's ordinary tokens.
pub fn toy_dataset(model: &ModelSnapshot, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = model.vocab.len() as u32;
    let instances = (0..n)
        .map(|i| {
            let len = rng.random_range(2..7);
            Instance {
                id: format!("t{i:03}"),
                segment_a: (0..len).map(|_| rng.random_range(RESERVED as u32..size)).collect(),
                segment_b: None,
                label: rng.random_range(0..model.num_classes()),
                raw_text: String::new(),
                annotations: vec![],
            }
        })
        .collect();
    Dataset {
        instances,
        class_names: (0..model.num_classes()).map(|c| format!("c{c}")).collect(),
        role: Role::Train,
        vocab_hash: model.vocab.hash().to_string(),
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
