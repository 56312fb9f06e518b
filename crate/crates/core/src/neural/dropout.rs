//! Variational dropout: one mask per sequence and layer, reused at every step.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutRates {
    pub input: f64,
    pub recurrent: f64,
}

/// Inverted masks (`0` or `1/(1-p)`); row `b` belongs to batch slot `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub input: Vec<Array2<f64>>,
    pub recurrent: Vec<Array2<f64>>,
}

impl DropoutMasks {
    pub(crate) fn check(&self, batch: usize, shapes: &[(usize, usize)]) -> Result<()> {
        let ok = self.input.len() == shapes.len()
            && self.recurrent.len() == shapes.len()
            && shapes.iter().enumerate().all(|(l, &(i, h))| {
                self.input[l].dim() == (batch, i) && self.recurrent[l].dim() == (batch, h)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "dropout masks do not match batch/model".into(),
            ))
        }
    }
}

fn sequence_rng(seed: u64, epoch: u64, sequence: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sequence);
    rng
}

fn draw(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    if p <= 0.0 {
        1.0
    } else if rng.random::<f64>() < p {
        0.0
    } else {
        1.0 / (1.0 - p)
    }
}

/// Masks for a batch; each sequence's masks depend only on
/// `(seed, epoch, sequence id)`, not on batch composition.
pub fn dropout_masks(
    seed: u64,
    epoch: u64,
    sequence_ids: &[u64],
    shapes: &[(usize, usize)],
    rates: DropoutRates,
) -> Result<DropoutMasks> {
    for p in [rates.input, rates.recurrent] {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
    }
    let b = sequence_ids.len();
    let mut input: Vec<_> = shapes.iter().map(|&(i, _)| Array2::zeros((b, i))).collect();
    let mut recurrent: Vec<_> = shapes.iter().map(|&(_, h)| Array2::zeros((b, h))).collect();
    for (row, &id) in sequence_ids.iter().enumerate() {
        let mut rng = sequence_rng(seed, epoch, id);
        for l in 0..shapes.len() {
            for v in input[l].row_mut(row) {
                *v = draw(&mut rng, rates.input);
            }
            for v in recurrent[l].row_mut(row) {
                *v = draw(&mut rng, rates.recurrent);
            }
        }
    }
    Ok(DropoutMasks { input, recurrent })
}

#[cfg(test)]
mod tests {
    use super::*;

    const RATES: DropoutRates = DropoutRates {
        input: 0.35,
        recurrent: 0.2,
    };

    #[test]
    fn independent_of_batch_position() {
        let shapes = [(5, 4), (4, 3)];
        let a = dropout_masks(1, 2, &[10, 11], &shapes, RATES).unwrap();
        let b = dropout_masks(1, 2, &[11], &shapes, RATES).unwrap();
        assert_eq!(a.input[1].row(1), b.input[1].row(0));
        assert_eq!(a.recurrent[0].row(1), b.recurrent[0].row(0));
    }

    #[test]
    fn epochs_differ() {
        let shapes = [(64, 64)];
        let a = dropout_masks(1, 0, &[3], &shapes, RATES).unwrap();
        let b = dropout_masks(1, 1, &[3], &shapes, RATES).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn inverted_scaling_preserves_mean() {
        let m = dropout_masks(9, 0, &(0..200).collect::<Vec<_>>(), &[(100, 1)], RATES).unwrap();
        let mean = m.input[0].mean().unwrap();
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        let kept = m.input[0].iter().filter(|&&v| v > 0.0).count() as f64 / 20000.0;
        assert!((kept - 0.65).abs() < 0.02);
    }

    #[test]
    fn zero_rate_is_identity() {
        let r = DropoutRates {
            input: 0.0,
            recurrent: 0.0,
        };
        let m = dropout_masks(1, 0, &[1, 2], &[(3, 2)], r).unwrap();
        assert!(m.input[0]
            .iter()
            .chain(m.recurrent[0].iter())
            .all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_bad_rate() {
        let r = DropoutRates {
            input: 1.0,
            recurrent: 0.0,
        };
        assert!(dropout_masks(1, 0, &[1], &[(1, 1)], r).is_err());
    }
}
