//! Regression objectives: squared-error loss and its polarity-weighted
//! variant, plus the polarity and mismatch primitives they are built on.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::num::Scalar;

/// Binary emotion polarity relative to a dichotomization threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// A (valence, arousal, dominance) label normalized to [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadLabel {
    pub v: f64,
    pub a: f64,
    pub d: f64,
}

impl VadLabel {
    pub fn new(v: f64, a: f64, d: f64) -> Result<Self> {
        for (name, x) in [("valence", v), ("arousal", a), ("dominance", d)] {
            if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                return Err(Error::Contract(format!(
                    "{name} label {x} outside [0, 1]"
                )));
            }
        }
        Ok(VadLabel { v, a, d })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.v, self.a, self.d]
    }
}

/// Penalty coefficient and dichotomization point of the polarity-weighted
/// loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcrConfig {
    pub lambda: f64,
    pub threshold: f64,
}

impl PcrConfig {
    pub fn new(lambda: f64, threshold: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "pcr lambda must be non-negative, got {lambda}"
            )));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "pcr threshold must lie in (0, 1), got {threshold}"
            )));
        }
        Ok(PcrConfig { lambda, threshold })
    }
}

impl Default for PcrConfig {
    fn default() -> Self {
        PcrConfig {
            lambda: 1.0,
            threshold: 0.5,
        }
    }
}

/// Polarity of a value on the normalized scale; ties classify as positive.
pub fn polarity(y: f64, threshold: f64) -> Polarity {
    if y >= threshold {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

/// 1 when prediction and ground truth fall on opposite sides of the
/// threshold, else 0.
pub fn mismatch(yhat: f64, y: f64, threshold: f64) -> u8 {
    u8::from(polarity(yhat, threshold) != polarity(y, threshold))
}

fn check_batch_shapes<T: Scalar>(
    g: &Graph<T>,
    preds: TensorId,
    targets: TensorId,
    op: &'static str,
) -> Result<usize> {
    let shape = g.shape(preds).to_vec();
    if g.shape(targets) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op,
            left: shape,
            right: g.shape(targets).to_vec(),
        });
    }
    match shape.as_slice() {
        [n, _] if *n >= 1 => Ok(*n),
        _ => Err(Error::ShapeMismatch {
            op,
            left: shape,
            right: vec![],
        }),
    }
}

/// Mean over the batch of the summed squared residuals: the per-sample sum
/// runs over the emotion dimensions and is not averaged.
pub fn mse_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: TensorId,
    targets: TensorId,
) -> Result<TensorId> {
    let batch = check_batch_shapes(g, preds, targets, "mse_loss")?;
    let diff = g.sub_elem(preds, targets)?;
    let squared = g.mul_elem(diff, diff)?;
    let total = g.sum_all(squared);
    Ok(g.scale_const(total, T::one() / T::of_f64(batch as f64)))
}

/// Squared-error loss with each term scaled by `1 + lambda` when the
/// prediction's polarity contradicts the ground truth.
///
/// The indicator weight is computed from the current forward values and
/// enters the graph as a constant, so it is not differentiated through: the
/// penalty acts as a piecewise-constant factor on the squared error.
pub fn pcr_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: TensorId,
    targets: TensorId,
    cfg: &PcrConfig,
) -> Result<TensorId> {
    let batch = check_batch_shapes(g, preds, targets, "pcr_loss")?;
    let weights: Vec<T> = g
        .values(preds)
        .iter()
        .zip(g.values(targets).iter())
        .map(|(&p, &t)| {
            let miss = mismatch(p.as_f64(), t.as_f64(), cfg.threshold);
            T::of_f64(1.0 + cfg.lambda * miss as f64)
        })
        .collect();
    let shape = g.shape(preds).to_vec();
    let weight_leaf = g.constant(shape, weights)?;
    let diff = g.sub_elem(preds, targets)?;
    let squared = g.mul_elem(diff, diff)?;
    let weighted = g.mul_elem(squared, weight_leaf)?;
    let total = g.sum_all(weighted);
    Ok(g.scale_const(total, T::one() / T::of_f64(batch as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polarity_examples() {
        assert_eq!(polarity(0.7, 0.5), Polarity::Positive);
        assert_eq!(polarity(0.5, 0.5), Polarity::Positive); // tie rule
        assert_eq!(polarity(0.49999, 0.5), Polarity::Negative);
    }

    #[test]
    fn mismatch_examples() {
        assert_eq!(mismatch(0.6, 0.7, 0.5), 0);
        assert_eq!(mismatch(0.4, 0.7, 0.5), 1);
        assert_eq!(mismatch(0.5, 0.5, 0.5), 0); // both positive by tie rule
    }

    #[test]
    fn vad_label_validates_range() {
        assert!(VadLabel::new(0.0, 0.5, 1.0).is_ok());
        assert!(VadLabel::new(1.2, 0.5, 0.5).is_err());
        assert!(VadLabel::new(0.5, -0.1, 0.5).is_err());
        assert!(VadLabel::new(0.5, f64::NAN, 0.5).is_err());
    }

    #[test]
    fn pcr_config_validates() {
        assert!(PcrConfig::new(0.0, 0.5).is_ok());
        assert!(PcrConfig::new(-1.0, 0.5).is_err());
        assert!(PcrConfig::new(1.0, 0.0).is_err());
        assert!(PcrConfig::new(1.0, 1.0).is_err());
    }

    fn batch(g: &mut Graph<f64>, rows: usize, v: &[f64]) -> TensorId {
        g.constant(vec![rows, v.len() / rows], v.to_vec()).unwrap()
    }

    #[test]
    fn mse_zero_when_equal() {
        let mut g = Graph::new();
        let p = batch(&mut g, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let t = batch(&mut g, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let loss = mse_loss(&mut g, p, t).unwrap();
        assert_eq!(g.values(loss), &[0.0]);
    }

    #[test]
    fn mse_direct_substitution() {
        let mut g = Graph::new();
        let p = batch(&mut g, 1, &[0.6, 0.7, 0.3]);
        let t = batch(&mut g, 1, &[0.5, 0.5, 0.3]);
        let loss = mse_loss(&mut g, p, t).unwrap();
        let want = 0.1f64 * 0.1 + 0.2 * 0.2; // inner sum over dimensions
        assert!((g.values(loss)[0] - want).abs() < 1e-15);
        assert!((g.values(loss)[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn mse_shape_mismatch_errors() {
        let mut g = Graph::new();
        let p = batch(&mut g, 1, &[0.6, 0.7, 0.3]);
        let t = batch(&mut g, 1, &[0.5, 0.5]);
        assert!(mse_loss(&mut g, p, t).is_err());
    }

    /// Scalar double-loop reimplementation used as the oracle.
    fn mse_oracle(preds: &[f64], targets: &[f64], rows: usize) -> f64 {
        let cols = preds.len() / rows;
        let mut total = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let d = preds[i * cols + j] - targets[i * cols + j];
                total += d * d;
            }
        }
        total / rows as f64
    }

    fn pcr_oracle(preds: &[f64], targets: &[f64], rows: usize, cfg: &PcrConfig) -> f64 {
        let cols = preds.len() / rows;
        let mut total = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let p = preds[i * cols + j];
                let t = targets[i * cols + j];
                let d = p - t;
                total += d * d * (1.0 + cfg.lambda * mismatch(p, t, cfg.threshold) as f64);
            }
        }
        total / rows as f64
    }

    #[test]
    fn mse_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let rows = 4;
            let preds: Vec<f64> = (0..rows * 3).map(|_| rng.gen::<f64>()).collect();
            let targets: Vec<f64> = (0..rows * 3).map(|_| rng.gen::<f64>()).collect();
            let mut g = Graph::new();
            let p = batch(&mut g, rows, &preds);
            let t = batch(&mut g, rows, &targets);
            let loss = mse_loss(&mut g, p, t).unwrap();
            let want = mse_oracle(&preds, &targets, rows);
            assert!((g.values(loss)[0] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn pcr_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = PcrConfig::new(2.0, 0.5).unwrap();
        for _ in 0..20 {
            let rows = 5;
            let preds: Vec<f64> = (0..rows * 3).map(|_| rng.gen::<f64>()).collect();
            let targets: Vec<f64> = (0..rows * 3).map(|_| rng.gen::<f64>()).collect();
            let mut g = Graph::new();
            let p = batch(&mut g, rows, &preds);
            let t = batch(&mut g, rows, &targets);
            let loss = pcr_loss(&mut g, p, t, &cfg).unwrap();
            let want = pcr_oracle(&preds, &targets, rows, &cfg);
            assert!((g.values(loss)[0] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn pcr_with_zero_lambda_equals_mse_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = PcrConfig::new(0.0, 0.5).unwrap();
        for _ in 0..50 {
            let rows = 3;
            let preds: Vec<f64> = (0..rows * 3).map(|_| rng.gen::<f64>()).collect();
            let targets: Vec<f64> = (0..rows * 3).map(|_| rng.gen::<f64>()).collect();
            let mut g = Graph::new();
            let p = batch(&mut g, rows, &preds);
            let t = batch(&mut g, rows, &targets);
            let a = mse_loss(&mut g, p, t).unwrap();
            let b = pcr_loss(&mut g, p, t, &cfg).unwrap();
            assert_eq!(g.values(a)[0].to_bits(), g.values(b)[0].to_bits());
        }
    }

    #[test]
    fn pcr_direct_substitution() {
        let mut g = Graph::new();
        let p = batch(&mut g, 1, &[0.8]);
        let t = batch(&mut g, 1, &[0.2]);
        let cfg = PcrConfig::new(1.0, 0.5).unwrap();
        let loss = pcr_loss(&mut g, p, t, &cfg).unwrap();
        let direct = (0.8f64 - 0.2) * (0.8f64 - 0.2) * 2.0;
        assert_eq!(g.values(loss)[0].to_bits(), direct.to_bits());
        assert!((g.values(loss)[0] - 0.72).abs() < 1e-12);
    }

    #[test]
    fn pcr_never_below_mse_and_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let grid = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
        for _ in 0..50 {
            let rows = 4;
            let preds: Vec<f64> = (0..rows * 3).map(|_| rng.gen::<f64>()).collect();
            let targets: Vec<f64> = (0..rows * 3).map(|_| rng.gen::<f64>()).collect();
            let mut g = Graph::new();
            let p = batch(&mut g, rows, &preds);
            let t = batch(&mut g, rows, &targets);
            let mse_id = mse_loss(&mut g, p, t).unwrap();
            let mse = g.values(mse_id)[0];
            let mut prev = f64::NEG_INFINITY;
            for lambda in grid {
                let cfg = PcrConfig::new(lambda, 0.5).unwrap();
                let loss_id = pcr_loss(&mut g, p, t, &cfg).unwrap();
                let loss = g.values(loss_id)[0];
                assert!(loss >= mse);
                assert!(loss >= prev);
                prev = loss;
            }
        }
    }
}
