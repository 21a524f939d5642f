//! Instance cross-entropy, the BarlowTwins redundancy-reduction loss and
//! the mixing objective that combines an instance loss with an incremental
//! one.

use serde::{Deserialize, Serialize};
use vinil_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Floor on the per-dimension batch standard deviation.
pub const BATCH_STD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Weight of the instance loss against the incremental loss.
    pub w_c: f64,
    /// Weight of the off-diagonal (redundancy) term of BarlowTwins.
    pub w_b: f64,
    pub batch_size: usize,
    pub epochs_per_session: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            w_c: 0.7,
            w_b: 0.03,
            batch_size: 64,
            epochs_per_session: 20,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w_c) {
            return Err(Error::Config(format!("w_c must lie in [0, 1], got {}", self.w_c)));
        }
        if self.w_b.is_nan() || self.w_b <= 0.0 {
            return Err(Error::Config(format!("w_b must be positive, got {}", self.w_b)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let &[batch, classes] = tape.shape(logits) else {
        return Err(Error::Loss(format!("logits must be [B,N], got {:?}", tape.shape(logits))));
    };
    if labels.len() != batch {
        return Err(Error::Loss(format!("{} labels for a batch of {batch}", labels.len())));
    }
    let mut onehot = vec![0.0; batch * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Loss(format!("label {label} out of range for {classes} classes")));
        }
        onehot[row * classes + label] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![batch, classes], onehot)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / batch as f64)?)
}

/// Standardizes every column over the batch (population std, floored at
/// [`BATCH_STD_EPS`]). Constant columns become zeros.
pub fn batch_normalize(tape: &mut Tape, z: Var) -> Result<Var> {
    match tape.shape(z) {
        [b, _] if *b >= 2 => {}
        s => return Err(Error::Loss(format!("batch_normalize needs [B>=2, D], got {s:?}"))),
    }
    let mean = tape.batch_mean(z)?;
    let std = tape.batch_std(z, BATCH_STD_EPS)?;
    let centered = tape.sub_rows(z, mean)?;
    Ok(tape.div_rows(centered, std)?)
}

/// `C = (1/B) · norm(z)ᵀ norm(z′)`, a `D′×D′` matrix.
pub fn cross_correlation(tape: &mut Tape, z: Var, z_prime: Var) -> Result<Var> {
    if tape.shape(z) != tape.shape(z_prime) {
        return Err(Error::Loss(format!(
            "cross_correlation views differ in shape: {:?} vs {:?}",
            tape.shape(z),
            tape.shape(z_prime)
        )));
    }
    let batch = tape.shape(z).first().copied().unwrap_or(0);
    let a = batch_normalize(tape, z)?;
    let b = batch_normalize(tape, z_prime)?;
    let at = tape.transpose(a)?;
    let c = tape.matmul(at, b)?;
    Ok(tape.scale(c, 1.0 / batch as f64)?)
}

/// `Σᵢ (1 − Cᵢᵢ)² + w_b Σᵢ Σ_{j≠i} Cᵢⱼ²`
pub fn barlow_twins(tape: &mut Tape, z: Var, z_prime: Var, w_b: f64) -> Result<Var> {
    let c = cross_correlation(tape, z, z_prime)?;
    let d = tape.shape(c)[0];
    let mut eye = vec![0.0; d * d];
    let mut weights = vec![w_b; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
        weights[i * d + i] = 1.0;
    }
    let eye = tape.constant(Tensor::new(vec![d, d], eye)?);
    let weights = tape.constant(Tensor::new(vec![d, d], weights)?);
    let diff = tape.sub(c, eye)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weights)?;
    Ok(tape.sum(weighted)?)
}

/// `w_c · L_inst + (1 − w_c) · L_incr`
pub fn combined_objective(tape: &mut Tape, l_inst: Var, l_incr: Var, w_c: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&w_c) {
        return Err(Error::Loss(format!("w_c must lie in [0, 1], got {w_c}")));
    }
    for v in [l_inst, l_incr] {
        match tape.value(v).item() {
            Some(x) if x.is_finite() => {}
            _ => return Err(Error::Loss(format!("combined_objective needs finite scalars, got {:?}", tape.value(v)))),
        }
    }
    let a = tape.scale(l_inst, w_c)?;
    let b = tape.scale(l_incr, 1.0 - w_c)?;
    Ok(tape.add(a, b)?)
}

/// A computed cross-correlation matrix, row-major `dim × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CrossCorrelation {
    pub fn compute(z: &Tensor, z_prime: &Tensor) -> Result<Self> {
        let mut tape = Tape::no_grad();
        let a = tape.constant(z.clone());
        let b = tape.constant(z_prime.clone());
        let c = cross_correlation(&mut tape, a, b)?;
        let t = tape.value(c);
        Ok(CrossCorrelation { dim: t.shape()[0], values: t.data().to_vec() })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }
}

/// BarlowTwins loss value without gradients.
pub fn barlow_twins_value(z: &Tensor, z_prime: &Tensor, w_b: f64) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let a = tape.constant(z.clone());
    let b = tape.constant(z_prime.clone());
    let l = barlow_twins(&mut tape, a, b, w_b)?;
    Ok(tape.value(l).item().expect("scalar"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let l = tape.constant(Tensor::matrix(logits).unwrap());
        let out = cross_entropy(&mut tape, l, labels)?;
        Ok(tape.value(out).item().unwrap())
    }

    fn normalize(rows: &[Vec<f64>]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let z = tape.constant(Tensor::matrix(rows).unwrap());
        let n = batch_normalize(&mut tape, z)?;
        Ok(tape.value(n).clone())
    }

    fn mix(a: f64, b: f64, w_c: f64) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let (x, y) = (tape.constant(Tensor::scalar(a)), tape.constant(Tensor::scalar(b)));
        let out = combined_objective(&mut tape, x, y, w_c)?;
        Ok(tape.value(out).item().unwrap())
    }

    #[test]
    fn ce_uniform_logits() {
        assert!((ce(&[vec![0.0, 0.0]], &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_saturated_correct() {
        assert!(ce(&[vec![10.0, -10.0]], &[0]).unwrap() < 1e-4);
    }

    #[test]
    fn ce_label_out_of_range() {
        assert!(ce(&[vec![0.0, 0.0]], &[2]).is_err());
        assert!(ce(&[vec![0.0, 0.0]], &[0, 1]).is_err());
    }

    #[test]
    fn ce_matches_direct_softmax() {
        let logits = vec![
            vec![0.3, -1.2, 2.0],
            vec![1.1, 0.0, -0.4],
            vec![-2.0, 0.5, 0.5],
            vec![0.0, 3.0, 1.0],
        ];
        let labels = [2, 0, 1, 1];
        // oracle: softmax straight from the definition
        let mut expected = 0.0f64;
        for (row, &y) in logits.iter().zip(&labels) {
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            expected -= (row[y].exp() / z).ln();
        }
        expected /= 4.0;
        assert!((ce(&logits, &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[vec![1.0], vec![-1.0]]).unwrap().data(), &[1.0, -1.0]);
        assert_eq!(normalize(&[vec![0.0], vec![2.0]]).unwrap().data(), &[-1.0, 1.0]);
        assert_eq!(normalize(&[vec![3.0], vec![3.0], vec![3.0]]).unwrap().data(), &[0.0; 3]);
        assert!(normalize(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn cross_correlation_hand_example() {
        let z = Tensor::matrix(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let c = CrossCorrelation::compute(&z, &z).unwrap();
        assert_eq!(c.values, vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn cross_correlation_shape_mismatch() {
        let a = Tensor::zeros(&[4, 2]).unwrap();
        let b = Tensor::zeros(&[4, 3]).unwrap();
        assert!(CrossCorrelation::compute(&a, &b).is_err());
    }

    #[test]
    fn bt_hand_example_is_two_w_b() {
        let z = Tensor::matrix(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!((barlow_twins_value(&z, &z, 0.03).unwrap() - 0.06).abs() < 1e-15);
    }

    #[test]
    fn bt_all_zero_correlation_is_dim() {
        // constant views normalize to zero columns, so C = 0
        let z = Tensor::ones(&[4, 3]).unwrap();
        assert_eq!(barlow_twins_value(&z, &z, 0.03).unwrap(), 3.0);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(mix(2.5, 99.0, 1.0).unwrap(), 2.5);
        assert!((mix(1.0, 1.0, 0.7).unwrap() - 1.0).abs() < 1e-15);
        assert!((mix(2.0, 1.0, 0.7).unwrap() - 1.7).abs() < 1e-12);
        assert!(mix(1.0, 1.0, 1.5).is_err());
        assert!(mix(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn hyperparams_validation() {
        assert!(HyperParams::default().validate().is_ok());
        assert!(HyperParams { w_c: 1.2, ..HyperParams::default() }.validate().is_err());
        assert!(HyperParams { w_b: 0.0, ..HyperParams::default() }.validate().is_err());
    }
}
