//! Dual-modal uniform alignment objective and baseline compatibility losses.
//!
//! With `s_ij = h_i · z_i^j`:
//!
//! * alignment: `Σ_i −log softmax_j(s_ij / τ)[y_i]` (a sum over the batch);
//! * class uniformity: mean over `(i, j)` of `1 + max_{k≠j} cos(z_i^j − c_i, z_i^k − c_i)`
//!   with `c_i` the mean of the `z_i^j`;
//! * instance uniformity: mean over `i` of `1 + max_{k≠i} cos(h_i − c_i, h_k − c_i)`
//!   over the other instances of the batch;
//! * total: `align + λ·(class + instance)`.
//!
//! Cosines use the guarded norm of [`Tape::normalize_rows`]. Ties inside a
//! max send the subgradient to the first maximal index.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::BatchForward;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 0.7;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, lambda: DEFAULT_LAMBDA }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Argument(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Argument(format!("uniformity weight must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Training objective selector.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Objective {
    Dua(LossConfig),
    /// Cross-entropy over `scale · h·z` logits.
    Ce { scale: f64 },
    /// Multi-class hinge on dot-product similarities.
    Hinge { margin: f64 },
}

/// Scalar loss nodes for one batch.
#[derive(Copy, Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub align: Var,
    pub cla: Var,
    pub ins: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Copy, Clone, Debug, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub align: f64,
    pub cla: f64,
    pub ins: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.value(self.total).item(),
            align: tape.value(self.align).item(),
            cla: tape.value(self.cla).item(),
            ins: tape.value(self.ins).item(),
        }
    }
}

/// `B x C` similarity logits `s_ij = h_i · z_i^j`.
pub fn similarity_logits(tape: &mut Tape, batch: &BatchForward) -> Result<Var> {
    if batch.h_rows.len() != batch.z.len() {
        return Err(Error::Argument("pair and class representation counts differ".into()));
    }
    let rows = batch
        .h_rows
        .iter()
        .zip(&batch.z)
        .map(|(&h, &z)| tape.matmul_nt(h, z))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Temperature-scaled contrastive alignment, summed over instances.
pub fn align_loss(tape: &mut Tape, logits: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let scaled = tape.scale(logits, 1.0 / tau)?;
    tape.softmax_cross_entropy(scaled, labels)
}

/// Class uniformity over per-instance class representations (`C x d_r` each).
/// Returns the loss and each instance's class center `c_i` (`1 x d_r`).
pub fn class_uniformity_loss(tape: &mut Tape, z: &[Var]) -> Result<(Var, Vec<Var>)> {
    let Some(&first) = z.first() else {
        return Err(Error::Argument("class uniformity needs at least one instance".into()));
    };
    let c = tape.value(first).rows();
    if c < 2 {
        return Err(Error::Argument(format!("class uniformity needs C >= 2 classes, got {c}")));
    }
    let excluded: Vec<Option<usize>> = (0..c).map(Some).collect();
    let mut centers = Vec::with_capacity(z.len());
    let mut maxima = Vec::with_capacity(z.len());
    for &zi in z {
        if tape.value(zi).rows() != c {
            return Err(Error::Argument("instances have different class counts".into()));
        }
        let center = tape.mean_rows(zi)?;
        let centered = tape.sub_row(zi, center)?;
        let unit = tape.normalize_rows(centered)?;
        let cos = tape.matmul_nt(unit, unit)?;
        maxima.push(tape.row_max_excluding(cos, &excluded)?);
        centers.push(center);
    }
    let all = tape.concat_rows(&maxima)?;
    let m = tape.mean(all)?;
    let one = tape.constant(Tensor::scalar(1.0));
    Ok((tape.add(one, m)?, centers))
}

/// Instance uniformity of the batch `h` (`B x d_r`) around per-instance centers.
pub fn instance_uniformity_loss(tape: &mut Tape, h: Var, centers: &[Var]) -> Result<Var> {
    let b = tape.value(h).rows();
    if b < 2 {
        return Err(Error::Argument(format!("instance uniformity needs B >= 2 instances, got {b}")));
    }
    if centers.len() != b {
        return Err(Error::Argument(format!("{} centers for {b} instances", centers.len())));
    }
    let mut maxima = Vec::with_capacity(b);
    for (i, &c) in centers.iter().enumerate() {
        let centered = tape.sub_row(h, c)?;
        let unit = tape.normalize_rows(centered)?;
        let own = tape.slice_rows(unit, i, 1)?;
        let cos = tape.matmul_nt(own, unit)?;
        maxima.push(tape.row_max_excluding(cos, &[Some(i)])?);
    }
    let all = tape.concat_rows(&maxima)?;
    let m = tape.mean(all)?;
    let one = tape.constant(Tensor::scalar(1.0));
    tape.add(one, m)
}

/// Full objective `align + λ·(class + instance)`.
///
/// A batch of one instance has no instance-uniformity partner; its `ins` term
/// is recorded as 0.
pub fn total_loss(tape: &mut Tape, batch: &BatchForward, config: LossConfig) -> Result<LossTerms> {
    config.validate()?;
    let logits = similarity_logits(tape, batch)?;
    let align = align_loss(tape, logits, &batch.labels, config.tau)?;
    let (cla, ins) = uniformity_terms(tape, batch)?;
    let uni = tape.add(cla, ins)?;
    let weighted = tape.scale(uni, config.lambda)?;
    let total = tape.add(align, weighted)?;
    Ok(LossTerms { total, align, cla, ins })
}

fn uniformity_terms(tape: &mut Tape, batch: &BatchForward) -> Result<(Var, Var)> {
    let (cla, centers) = class_uniformity_loss(tape, &batch.z)?;
    let ins = if batch.h_rows.len() >= 2 {
        instance_uniformity_loss(tape, batch.h, &centers)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    Ok((cla, ins))
}

/// Cross-entropy over `scale · s_ij`; identical to [`align_loss`] at `τ = 1/scale`.
pub fn baseline_ce_loss(tape: &mut Tape, logits: Var, labels: &[usize], scale: f64) -> Result<Var> {
    let scaled = tape.scale(logits, scale)?;
    tape.softmax_cross_entropy(scaled, labels)
}

/// `Σ_i Σ_{j≠y_i} max(0, margin − s_{i,y_i} + s_ij) / B`.
pub fn baseline_hinge_loss(tape: &mut Tape, logits: Var, labels: &[usize], margin: f64) -> Result<Var> {
    if !(margin > 0.0) {
        return Err(Error::Argument(format!("hinge margin must be positive, got {margin}")));
    }
    let (b, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != b || labels.iter().any(|&y| y >= c) {
        return Err(Error::Argument("hinge labels do not match the logits".into()));
    }
    // (I − e_y 1ᵀ) turns a row of similarities into s_j − s_y
    let mut terms = Vec::with_capacity(b);
    for (i, &y) in labels.iter().enumerate() {
        let mut diff = Tensor::identity(c);
        for j in 0..c {
            diff.data_mut()[y * c + j] -= 1.0;
        }
        let mut offsets = vec![margin; c];
        offsets[y] = -1.0;
        let row = tape.slice_rows(logits, i, 1)?;
        let d = tape.constant(diff);
        let rel = tape.matmul(row, d)?;
        let off = tape.constant(Tensor::row(&offsets));
        let shifted = tape.add(rel, off)?;
        terms.push(tape.relu(shifted)?);
    }
    let all = tape.concat_rows(&terms)?;
    let s = tape.sum(all)?;
    tape.scale(s, 1.0 / b as f64)
}

/// Evaluates `objective` on a batch. Baseline objectives still report the
/// uniformity terms, which then do not enter `total`.
pub fn objective_loss(tape: &mut Tape, batch: &BatchForward, objective: Objective) -> Result<LossTerms> {
    match objective {
        Objective::Dua(config) => total_loss(tape, batch, config),
        Objective::Ce { scale } => {
            let logits = similarity_logits(tape, batch)?;
            let align = baseline_ce_loss(tape, logits, &batch.labels, scale)?;
            let (cla, ins) = uniformity_terms(tape, batch)?;
            Ok(LossTerms { total: align, align, cla, ins })
        }
        Objective::Hinge { margin } => {
            let logits = similarity_logits(tape, batch)?;
            let align = baseline_hinge_loss(tape, logits, &batch.labels, margin)?;
            let (cla, ins) = uniformity_terms(tape, batch)?;
            Ok(LossTerms { total: align, align, cla, ins })
        }
    }
}

/// Evaluates the objective on plain tensors: `h` is `B x d`, `z[i]` is `C x d`.
pub fn evaluate(h: &Tensor, z: &[Tensor], labels: &[usize], objective: Objective) -> Result<LossValues> {
    let mut tape = Tape::new();
    let batch = constant_batch(&mut tape, h, z, labels)?;
    Ok(objective_loss(&mut tape, &batch, objective)?.values(&tape))
}

/// Records `h` and `z` as tape leaves (trainable or not) in batch layout.
pub fn leaf_batch(tape: &mut Tape, h: Var, z: &[Var], labels: &[usize]) -> Result<BatchForward> {
    let b = tape.value(h).rows();
    if z.len() != b {
        return Err(Error::Argument(format!("{} class blocks for {b} instances", z.len())));
    }
    let h_rows = (0..b).map(|i| tape.slice_rows(h, i, 1)).collect::<Result<Vec<_>>>()?;
    Ok(BatchForward { h_rows, h, z: z.to_vec(), labels: labels.to_vec() })
}

fn constant_batch(tape: &mut Tape, h: &Tensor, z: &[Tensor], labels: &[usize]) -> Result<BatchForward> {
    let hv = tape.constant(h.clone());
    let zv: Vec<Var> = z.iter().map(|t| tape.constant(t.clone())).collect();
    leaf_batch(tape, hv, &zv, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    fn cla(z: &[Tensor]) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = z.iter().map(|x| tape.constant(x.clone())).collect();
        let (l, _) = class_uniformity_loss(&mut tape, &vars).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn two_classes_are_antipodal() {
        assert_eq!(cla(&[t(2, 2, &[2.0, 0.0, 0.0, 0.0])]), 0.0);
        assert!(cla(&[t(2, 3, &[0.3, -1.7, 2.2, 5.0, 0.1, -0.4])]).abs() < 1e-12);
    }

    #[test]
    fn equilateral_three_classes() {
        let s = libm::sqrt(3.0) / 2.0;
        let z = t(3, 2, &[1.0 + 1.0, 5.0, 1.0 - 0.5, 5.0 + s, 1.0 - 0.5, 5.0 - s]);
        assert!((cla(&[z]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(1, 3));
        assert!(class_uniformity_loss(&mut tape, &[z]).is_err());
    }

    #[test]
    fn crowded_instances_score_two() {
        let mut tape = Tape::new();
        let h = tape.constant(t(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let c = tape.constant(Tensor::row(&[0.0, 0.5]));
        let l = instance_uniformity_loss(&mut tape, h, &[c, c, c]).unwrap();
        assert!((tape.value(l).item() - 2.0).abs() < 1e-15);
        let one = tape.constant(Tensor::row(&[1.0, 1.0]));
        assert!(instance_uniformity_loss(&mut tape, one, &[c]).is_err());
    }

    #[test]
    fn antipodal_pair_of_instances_scores_zero() {
        let mut tape = Tape::new();
        let h = tape.constant(t(2, 2, &[1.0, 0.0, -1.0, 0.0]));
        let c = tape.constant(Tensor::row(&[0.0, 0.0]));
        let l = instance_uniformity_loss(&mut tape, h, &[c, c]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn align_small_case() {
        // one instance, sims (1, 0), tau 1: ln(1 + e^-1)
        let mut tape = Tape::new();
        let s = tape.constant(t(1, 2, &[1.0, 0.0]));
        let l = align_loss(&mut tape, s, &[0], 1.0).unwrap();
        assert!((tape.value(l).item() - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn hinge_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(t(1, 2, &[0.0, 0.0]));
        let l = baseline_hinge_loss(&mut tape, s, &[0], 0.1).unwrap();
        assert!((tape.value(l).item() - 0.1).abs() < 1e-15);
        let s = tape.constant(t(2, 3, &[2.0, 0.5, 1.0, -1.0, 3.0, 1.9]));
        let l = baseline_hinge_loss(&mut tape, s, &[0, 1], 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn zero_lambda_total_is_alignment() {
        let h = t(2, 2, &[0.5, -1.0, 2.0, 0.3]);
        let z = [t(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 1.0]), t(3, 2, &[0.2, 0.1, 0.0, -1.0, 1.0, 1.0])];
        let v = evaluate(&h, &z, &[2, 0], Objective::Dua(LossConfig { tau: 0.9, lambda: 0.0 })).unwrap();
        assert_eq!(v.total, v.align);
        assert!(v.cla > 0.0 && v.ins > 0.0);
    }
}
