//! Margin loss, HR-anchor loss, targeted reconstruction loss and their
//! weighted combination.
//!
//! Batched forms work on `[N, ·]` tape variables and return one loss per
//! sample; the single-sample helpers wrap them for direct evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginParams {
    pub m_plus: f64,
    pub m_minus: f64,
    /// Down-weight of the absent-class term.
    pub lambda_down: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
        }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "margins must satisfy 0 <= m_minus < m_plus <= 1, got {} and {}",
                self.m_minus, self.m_plus
            )));
        }
        if self.lambda_down <= 0.0 {
            return Err(Error::InvalidArgument(format!("lambda_down must be positive, got {}", self.lambda_down)));
        }
        Ok(())
    }
}

/// Weights of the auxiliary terms; zero disables a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// HR-anchor loss weight.
    pub lambda1: f64,
    /// Targeted reconstruction loss weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1e-3,
            lambda2: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// How per-sample losses are folded into the batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Resolution of a training sample. The HR-anchor is trainable only
/// through HR samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Vlr,
    Hr,
}

impl Resolution {
    pub fn flag(self) -> u8 {
        match self {
            Resolution::Vlr => 0,
            Resolution::Hr => 1,
        }
    }

    pub fn from_flag(r: u8) -> Result<Self> {
        match r {
            0 => Ok(Resolution::Vlr),
            1 => Ok(Resolution::Hr),
            _ => Err(Error::InvalidArgument(format!("resolution flag must be 0 or 1, got {r}"))),
        }
    }
}

/// How anchors are learned.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnchorMode {
    /// Anchors are parameters updated by the optimizer from HR gradients.
    #[default]
    Gradient,
    /// Anchors track an exponential moving average of HR features per class
    /// and are always constant inside the loss.
    RunningMean { momentum: f64 },
}

/// One anchor vector per class in feature space.
#[derive(Debug, Clone)]
pub struct AnchorBank<T> {
    pub anchors: Param<T>,
    pub mode: AnchorMode,
}

impl<T: Real> AnchorBank<T> {
    pub const PARAM_NAME: &'static str = "anchors";

    /// Zero-initialized `[num_classes, feature_dim]` bank.
    pub fn new(num_classes: usize, feature_dim: usize, mode: AnchorMode) -> Self {
        AnchorBank {
            anchors: Param::new(Self::PARAM_NAME, Tensor::zeros(&[num_classes, feature_dim])),
            mode,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.value.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.anchors.value.shape()[1]
    }

    pub fn anchor(&self, class: usize) -> &[T] {
        let d = self.feature_dim();
        &self.anchors.value.data()[class * d..(class + 1) * d]
    }

    /// Running-mean update from the HR rows of a batch of features.
    pub fn update_running_mean(&mut self, features: &[T], labels: &[usize], resolutions: &[Resolution]) {
        let AnchorMode::RunningMean { momentum } = self.mode else {
            return;
        };
        let d = self.feature_dim();
        let k = self.num_classes();
        let mut sums = vec![T::zero(); k * d];
        let mut counts = vec![0usize; k];
        for (n, (&c, &r)) in labels.iter().zip(resolutions).enumerate() {
            if r == Resolution::Hr {
                counts[c] += 1;
                for (s, &f) in sums[c * d..(c + 1) * d].iter_mut().zip(&features[n * d..(n + 1) * d]) {
                    *s += f;
                }
            }
        }
        let keep = T::from_f64(momentum);
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = T::one() / T::from_f64(counts[c] as f64);
            let row = &mut self.anchors.value.data_mut()[c * d..(c + 1) * d];
            for (a, &s) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *a = keep * *a + (T::one() - keep) * s * inv;
            }
        }
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape("labels", format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("class {c} out of range for {classes} classes")));
    }
    Ok(())
}

/// Per-sample margin loss for capsule lengths `[N, K]`.
pub fn margin_loss_batch<T: Real>(tape: &mut Tape<T>, lengths: Var, labels: &[usize], p: &MarginParams) -> Result<Var> {
    let s = tape.shape(lengths).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("margin_loss", format!("expected [N, K] lengths, got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    check_labels(labels, n, k)?;
    let mut present = Tensor::<T>::zeros(&[n, k]);
    let mut absent = Tensor::<T>::full(&[n, k], T::from_f64(p.lambda_down));
    for (row, &c) in labels.iter().enumerate() {
        present.data_mut()[row * k + c] = T::one();
        absent.data_mut()[row * k + c] = T::zero();
    }
    let present = tape.constant(present);
    let absent = tape.constant(absent);

    // max(0, m+ − ‖v‖)²
    let neg = tape.scale(lengths, -1.0)?;
    let up = tape.add_scalar(neg, p.m_plus)?;
    let up = tape.max0(up)?;
    let up = tape.square(up)?;
    let up = tape.mul(present, up)?;
    // λ·max(0, ‖v‖ − m−)²
    let down = tape.add_scalar(lengths, -p.m_minus)?;
    let down = tape.max0(down)?;
    let down = tape.square(down)?;
    let down = tape.mul(absent, down)?;

    let total = tape.add(up, down)?;
    tape.sum_axis(total, 1)
}

/// Per-sample HR-anchor loss `½‖f − A^c‖²` for features `[N, F]`.
///
/// For VLR rows the anchor enters as a constant, so only HR rows send
/// gradient to the bank. In running-mean mode the anchor is always
/// constant.
pub fn hr_anchor_loss_batch<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    labels: &[usize],
    resolutions: &[Resolution],
    bank: &AnchorBank<T>,
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 || s[1] != bank.feature_dim() {
        return Err(Error::shape(
            "hr_anchor_loss",
            format!("features {s:?} against anchors {:?}", bank.anchors.value.shape()),
        ));
    }
    let (n, d) = (s[0], s[1]);
    check_labels(labels, n, bank.num_classes())?;
    if resolutions.len() != n {
        return Err(Error::shape("hr_anchor_loss", format!("{} resolution flags for batch of {n}", resolutions.len())));
    }

    let frozen = tape.bind_frozen(&bank.anchors);
    let frozen_rows = tape.gather_rows(frozen, labels)?;
    let target = if matches!(bank.mode, AnchorMode::Gradient) {
        let live = tape.bind(&bank.anchors);
        let live_rows = tape.gather_rows(live, labels)?;
        let mut hr = Tensor::<T>::zeros(&[n, d]);
        let mut vlr = Tensor::<T>::zeros(&[n, d]);
        for (row, r) in resolutions.iter().enumerate() {
            let dst = match r {
                Resolution::Hr => &mut hr,
                Resolution::Vlr => &mut vlr,
            };
            dst.data_mut()[row * d..(row + 1) * d].iter_mut().for_each(|v| *v = T::one());
        }
        let hr = tape.constant(hr);
        let vlr = tape.constant(vlr);
        let live_part = tape.mul(hr, live_rows)?;
        let frozen_part = tape.mul(vlr, frozen_rows)?;
        tape.add(live_part, frozen_part)?
    } else {
        frozen_rows
    };
    let diff = tape.sub(features, target)?;
    let sq = tape.sq_l2_norm(diff)?;
    tape.scale(sq, 0.5)
}

fn recon_common<T: Real>(tape: &mut Tape<T>, recon: Var, target: Var, op: &'static str) -> Result<Var> {
    let (sr, st) = (tape.shape(recon).to_vec(), tape.shape(target).to_vec());
    if sr != st || sr.len() != 2 {
        return Err(Error::shape(op, format!("reconstruction {sr:?} vs target {st:?}")));
    }
    let diff = tape.sub(target, recon)?;
    tape.sq_l2_norm(diff)
}

/// Per-sample `‖hr − g(v_c)‖²` for flattened images `[N, P]`. The ½ factor
/// is applied when the terms are combined.
pub fn targeted_reconstruction_loss_batch<T: Real>(tape: &mut Tape<T>, recon: Var, hr_target: Var) -> Result<Var> {
    recon_common(tape, recon, hr_target, "targeted_reconstruction_loss")
}

/// Plain reconstruction loss `½‖x − g(v_c)‖²` with the input as target,
/// kept for baseline comparisons.
pub fn reconstruction_loss_batch<T: Real>(tape: &mut Tape<T>, recon: Var, input: Var) -> Result<Var> {
    let sq = recon_common(tape, recon, input, "reconstruction_loss")?;
    tape.scale(sq, 0.5)
}

/// Per-sample terms of the objective; disabled terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub margin: Var,
    pub anchor: Option<Var>,
    pub recon: Option<Var>,
}

/// `margin + λ₁·anchor + (λ₂/2)·recon` per sample, reduced over the batch.
pub fn combine_losses<T: Real>(tape: &mut Tape<T>, terms: LossTerms, weights: &LossWeights, reduction: Reduction) -> Result<Var> {
    let mut total = terms.margin;
    if let Some(a) = terms.anchor {
        let a = tape.scale(a, weights.lambda1)?;
        total = tape.add(total, a)?;
    }
    if let Some(r) = terms.recon {
        let r = tape.scale(r, weights.lambda2 * 0.5)?;
        total = tape.add(total, r)?;
    }
    match reduction {
        Reduction::Mean => tape.mean(total),
        Reduction::Sum => tape.sum(total),
    }
}

/// Margin loss of one sample's class-capsule lengths `[K]`.
pub fn margin_loss<T: Real>(lengths: &Tensor<T>, true_class: usize, p: &MarginParams) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.constant(lengths.clone().reshaped(&[1, lengths.len()])?);
    let loss = margin_loss_batch(&mut tape, l, &[true_class], p)?;
    Ok(tape.value(loss).item())
}

pub fn hr_anchor_loss<T: Real>(features: &Tensor<T>, class: usize, resolution: Resolution, bank: &AnchorBank<T>) -> Result<T> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone().reshaped(&[1, features.len()])?);
    let loss = hr_anchor_loss_batch(&mut tape, f, &[class], &[resolution], bank)?;
    Ok(tape.value(loss).item())
}

pub fn targeted_reconstruction_loss<T: Real>(recon: &Tensor<T>, hr_target: &Tensor<T>) -> Result<T> {
    if recon.shape() != hr_target.shape() {
        return Err(Error::shape(
            "targeted_reconstruction_loss",
            format!("{:?} vs {:?}", recon.shape(), hr_target.shape()),
        ));
    }
    let mut tape = Tape::new();
    let r = tape.constant(recon.clone().reshaped(&[1, recon.len()])?);
    let t = tape.constant(hr_target.clone().reshaped(&[1, hr_target.len()])?);
    let loss = targeted_reconstruction_loss_batch(&mut tape, r, t)?;
    Ok(tape.value(loss).item())
}

/// Full single-sample objective.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    lengths: &Tensor<T>,
    true_class: usize,
    features: &Tensor<T>,
    resolution: Resolution,
    bank: &AnchorBank<T>,
    recon: &Tensor<T>,
    hr_target: &Tensor<T>,
    weights: &LossWeights,
    margin_params: &MarginParams,
) -> Result<T> {
    let margin = margin_loss(lengths, true_class, margin_params)?;
    let anchor = hr_anchor_loss(features, true_class, resolution, bank)?;
    let recon = targeted_reconstruction_loss(recon, hr_target)?;
    Ok(margin + T::from_f64(weights.lambda1) * anchor + T::from_f64(weights.lambda2 * 0.5) * recon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn margin_examples() {
        let p = MarginParams::default();
        assert_eq!(margin_loss(&t(&[0.9, 0.1]), 0, &p).unwrap(), 0.0);
        let v = margin_loss(&t(&[0.0, 1.0]), 0, &p).unwrap();
        assert!((v - 1.215).abs() < 1e-12);
        let v = margin_loss(&t(&[0.5]), 0, &p).unwrap();
        assert!((v - 0.16).abs() < 1e-12);
        assert!(margin_loss(&t(&[0.5, 0.2]), 2, &p).is_err());
    }

    #[test]
    fn margin_params_validation() {
        assert!(MarginParams::default().validate().is_ok());
        let bad = MarginParams { m_minus: 0.9, m_plus: 0.1, lambda_down: 0.5 };
        assert!(bad.validate().is_err());
        let bad = MarginParams { lambda_down: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0 }.validate().is_err());
    }

    #[test]
    fn anchor_examples() {
        let mut bank = AnchorBank::<f64>::new(2, 2, AnchorMode::Gradient);
        bank.anchors.value = Tensor::from_f64(&[2, 2], &[0.0, 0.0, 0.3, -0.2]).unwrap();
        for r in [Resolution::Hr, Resolution::Vlr] {
            assert_eq!(hr_anchor_loss(&t(&[0.3, -0.2]), 1, r, &bank).unwrap(), 0.0);
        }
        assert_eq!(hr_anchor_loss(&t(&[1.0, 0.0]), 0, Resolution::Hr, &bank).unwrap(), 0.5);
        assert!(hr_anchor_loss(&t(&[1.0, 0.0]), 2, Resolution::Hr, &bank).is_err());
    }

    #[test]
    fn anchor_gradient_depends_on_resolution() {
        let mut bank = AnchorBank::<f64>::new(2, 3, AnchorMode::Gradient);
        bank.anchors.value = Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, -0.5, 0.4, 0.0]).unwrap();
        let f = [0.7, -0.1, 0.25];
        for r in [Resolution::Vlr, Resolution::Hr] {
            let mut tape = Tape::new();
            let fv = tape.variable(Tensor::from_f64(&[1, 3], &f).unwrap());
            let loss = hr_anchor_loss_batch(&mut tape, fv, &[1], &[r], &bank).unwrap();
            let loss = tape.sum(loss).unwrap();
            tape.backward(loss).unwrap();
            let ga = tape.param_grad(AnchorBank::<f64>::PARAM_NAME).unwrap().data().to_vec();
            let gf = tape.grad(fv).unwrap().data().to_vec();
            for i in 0..3 {
                assert_eq!(gf[i], f[i] - bank.anchor(1)[i]);
                assert_eq!(ga[i], 0.0);
                let expected = match r {
                    Resolution::Vlr => 0.0,
                    Resolution::Hr => bank.anchor(1)[i] - f[i],
                };
                assert_eq!(ga[3 + i], expected);
            }
        }
    }

    #[test]
    fn recon_examples() {
        let img = t(&[0.2, 0.4, 0.9]);
        assert_eq!(targeted_reconstruction_loss(&img, &img).unwrap(), 0.0);
        let n = 7;
        let v = targeted_reconstruction_loss(&Tensor::<f64>::zeros(&[n]), &Tensor::ones(&[n])).unwrap();
        assert_eq!(v, n as f64);
        assert!(targeted_reconstruction_loss(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn total_with_zero_weights_is_margin() {
        let mut bank = AnchorBank::<f64>::new(3, 2, AnchorMode::Gradient);
        bank.anchors.value.data_mut()[0] = 5.0;
        let lengths = t(&[0.3, 0.7, 0.2]);
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let p = MarginParams::default();
        let total = total_loss(&lengths, 1, &t(&[1.0, 2.0]), Resolution::Vlr, &bank, &t(&[0.1]), &t(&[0.9]), &w, &p).unwrap();
        assert_eq!(total, margin_loss(&lengths, 1, &p).unwrap());
    }

    #[test]
    fn running_mean_anchor_update() {
        let mut bank = AnchorBank::<f64>::new(2, 2, AnchorMode::RunningMean { momentum: 0.5 });
        let feats = [1.0, 2.0, 3.0, 4.0, 100.0, 100.0];
        bank.update_running_mean(&feats, &[0, 0, 1], &[Resolution::Hr, Resolution::Hr, Resolution::Vlr]);
        assert_eq!(bank.anchor(0), &[1.0, 1.5]);
        assert_eq!(bank.anchor(1), &[0.0, 0.0]);
    }
}
