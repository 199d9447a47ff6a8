use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::Condition;
use super::params::Model;
use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::tensor::{softmax_last, Dims3};

/// Token selection rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    /// Argmax; ties go to the lowest id.
    Greedy,
    /// Draw from `softmax(logits / tau)` with a seeded generator.
    Temperature { tau: f64, seed: u64 },
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn draw(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` just below 1; take the last non-zero entry
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Autoregressive generation in canonical order. `given` tokens are copied
/// into the first positions (the visible frame for video prediction); the
/// rest are produced one at a time from the growing prefix.
pub fn sample(model: &Model, cond: &Condition, target_dims: Dims3, strategy: Strategy, given: &[usize]) -> Result<TokenGrid> {
    let mut rng = match strategy {
        Strategy::Temperature { tau, seed } => {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::contract(format!("temperature must be positive and finite, got {tau}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Strategy::Greedy => None,
    };
    let n = target_dims.len();
    let vocab = model.config().vocab;
    if given.len() > n {
        return Err(Error::contract(format!("{} given tokens exceed {n} positions", given.len())));
    }
    if let Some(&bad) = given.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index {
            what: "vocabulary",
            index: bad,
            bound: vocab,
        });
    }

    let c_l = model.encode(&model.condition_repr(cond)?)?;
    let mut tokens = given.to_vec();
    while tokens.len() < n {
        let len = tokens.len() + 1;
        let prefix = model.decoder_input(&tokens, len, target_dims)?;
        let hidden = model.decode_hidden(&prefix, target_dims, &c_l)?;
        let z = model.logits(hidden.row(len - 1))?;
        let next = match (&strategy, rng.as_mut()) {
            (Strategy::Temperature { tau, .. }, Some(rng)) => {
                let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
                draw(&softmax_last(&scaled)?, rng)
            }
            _ => argmax(&z),
        };
        tokens.push(next);
    }
    TokenGrid::from_usize(target_dims, vocab, &tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::init_scaled(ModelConfig::toy(), 21, 1.0).unwrap()
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[3.0, 3.0]), 0);
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = model();
        let dims = Dims3::new(2, 2, 2);
        let cond = Condition::Text(vec![1, 2, 3]);
        let a = sample(&m, &cond, dims, Strategy::Greedy, &[]).unwrap();
        let b = sample(&m, &cond, dims, Strategy::Greedy, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ids().len(), 8);
    }

    #[test]
    fn low_temperature_matches_greedy() {
        let m = model();
        let dims = Dims3::new(2, 2, 2);
        let cond = Condition::Text(vec![4, 5]);
        let g = sample(&m, &cond, dims, Strategy::Greedy, &[]).unwrap();
        let t = sample(&m, &cond, dims, Strategy::Temperature { tau: 1e-6, seed: 3 }, &[]).unwrap();
        assert_eq!(g, t);
    }

    #[test]
    fn temperature_is_seeded() {
        let m = model();
        let dims = Dims3::new(2, 2, 2);
        let hot = |seed| sample(&m, &Condition::None, dims, Strategy::Temperature { tau: 50.0, seed }, &[]).unwrap();
        assert_eq!(hot(1), hot(1));
        assert!((2..12).any(|s| hot(s) != hot(1)));
    }

    #[test]
    fn given_prefix_is_kept() {
        let m = model();
        let dims = Dims3::new(2, 2, 2);
        let out = sample(&m, &Condition::None, dims, Strategy::Greedy, &[9, 8, 7, 6]).unwrap();
        assert_eq!(&out.to_usize()[..4], &[9, 8, 7, 6]);
        let all = [1, 2, 3, 4, 5, 6, 7, 8];
        assert_eq!(sample(&m, &Condition::None, dims, Strategy::Greedy, &all).unwrap().to_usize(), all);
    }

    #[test]
    fn errors() {
        let m = model();
        let dims = Dims3::new(2, 2, 2);
        for tau in [0.0, -1.0, f64::NAN] {
            let s = Strategy::Temperature { tau, seed: 0 };
            assert!(matches!(sample(&m, &Condition::None, dims, s, &[]), Err(Error::Contract(_))));
        }
        assert!(sample(&m, &Condition::None, dims, Strategy::Greedy, &[16]).is_err());
        assert!(sample(&m, &Condition::None, Dims3::new(2, 2, 3), Strategy::Greedy, &[]).is_err());
    }

    #[test]
    fn draw_inverts_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[draw(&[0.2, 0.0, 0.8], &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 3000.0 - 0.2).abs() < 0.03);
    }
}
