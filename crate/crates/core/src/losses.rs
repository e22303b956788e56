//! Fine-tuning objectives on student logits: label cross entropy, logit
//! pairing, hard distillation and temperature distillation, plus their
//! weighted sum.
//!
//! Every term is a mean over positions (examples, or pixels for per-pixel
//! logits) and returns its gradient with respect to the student logits.
//! Teacher logits are constants.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{self, log_softmax_row, softmax_row, Tape};
use crate::error::{config, domain, Error, Result};
use crate::models::Network;
use crate::tensor::{ClassLayout, Tensor};
use crate::weighting::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossTerm {
    /// Cross entropy against ground-truth labels.
    Ce,
    /// Squared-error logit pairing with the reference.
    Mse,
    /// Cross entropy against the reference's argmax prediction.
    CePred,
    /// KL divergence to the reference's temperature softmax.
    Kd,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Ce, LossTerm::Mse, LossTerm::CePred, LossTerm::Kd];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Mse => "mse",
            LossTerm::CePred => "ce_pred",
            LossTerm::Kd => "kd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        LossTerm::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn needs_teacher(self) -> bool {
        self != LossTerm::Ce
    }
}

/// Which terms are active and how distillation is tempered.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub terms: Vec<LossTerm>,
    pub temperature: f64,
    /// Divide the student logits by the temperature too (the common
    /// Hinton-style variant). Off by default: only the teacher is tempered.
    pub kd_symmetric: bool,
}

impl LossConfig {
    pub fn new(terms: &[LossTerm]) -> Result<Self> {
        let mut uniq: Vec<LossTerm> = Vec::new();
        for &t in terms {
            if uniq.contains(&t) {
                return Err(config(format!("loss term {} listed twice", t.name())));
            }
            uniq.push(t);
        }
        if uniq.is_empty() {
            return Err(config("at least one loss term must be active"));
        }
        Ok(Self {
            terms: uniq,
            temperature: 1.0,
            kd_symmetric: false,
        })
    }

    pub fn with_temperature(mut self, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(domain("temperature must be positive"));
        }
        self.temperature = t;
        Ok(self)
    }

    pub fn needs_teacher(&self) -> bool {
        self.terms.iter().any(|t| t.needs_teacher())
    }
}

/// Unweighted value of each term; `None` for inactive terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TermValues(pub [Option<f64>; 4]);

impl TermValues {
    pub fn get(&self, t: LossTerm) -> Option<f64> {
        self.0[t.index()]
    }

    pub fn set(&mut self, t: LossTerm, v: f64) {
        self.0[t.index()] = Some(v);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub terms: TermValues,
    pub grad: Tensor,
}

fn check_labels(layout: &ClassLayout, labels: &[usize]) -> Result<()> {
    if labels.len() != layout.positions {
        return Err(domain(format!(
            "{} labels for {} positions",
            labels.len(),
            layout.positions
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= layout.classes) {
        return Err(domain(format!("label {bad} outside [0, {})", layout.classes)));
    }
    Ok(())
}

fn check_pair(student: &Tensor, teacher: &Tensor) -> Result<ClassLayout> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape {
            context: "student/teacher logits".into(),
            expected: teacher.shape().to_vec(),
            got: student.shape().to_vec(),
        });
    }
    ClassLayout::of(student)
}

/// Mean of `-log softmax(logits)[label]`; gradient `(softmax - onehot) / N`.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let layout = ClassLayout::of(logits)?;
    check_labels(&layout, labels)?;
    let n = layout.positions as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut row = vec![0.0; layout.classes];
    let mut logp = vec![0.0; layout.classes];
    let mut total = 0.0;
    for (pos, &y) in labels.iter().enumerate() {
        layout.read(logits.data(), pos, &mut row);
        log_softmax_row(&row, 1.0, &mut logp);
        total -= logp[y];
        let b = layout.base(pos);
        for c in 0..layout.classes {
            let p = libm::exp(logp[c]);
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad.data_mut()[b + c * layout.stride()] = (p - onehot) / n;
        }
    }
    Ok((total / n, grad))
}

/// Mean over positions of the squared L2 distance across classes.
pub fn mse_pairing_loss(student: &Tensor, teacher: &Tensor) -> Result<(f64, Tensor)> {
    let layout = check_pair(student, teacher)?;
    let n = layout.positions as f64;
    let mut grad = Tensor::zeros(student.shape());
    let mut total = 0.0;
    for ((g, s), t) in grad.data_mut().iter_mut().zip(student.data()).zip(teacher.data()) {
        let d = s - t;
        total += d * d;
        *g = 2.0 * d / n;
    }
    Ok((total / n, grad))
}

/// Cross entropy against the teacher's argmax (lowest index wins ties).
pub fn ce_pred_loss(student: &Tensor, teacher: &Tensor) -> Result<(f64, Tensor)> {
    let layout = check_pair(student, teacher)?;
    let pseudo = layout.argmax(teacher.data());
    ce_loss(student, &pseudo)
}

/// `KL(softmax(student) || softmax(teacher / T))`, averaged over positions.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    kd_loss_with(student, teacher, temperature, false)
}

/// Distillation KL; with `symmetric` the student is tempered as well.
pub fn kd_loss_with(student: &Tensor, teacher: &Tensor, temperature: f64, symmetric: bool) -> Result<(f64, Tensor)> {
    if !(temperature > 0.0) {
        return Err(domain("temperature must be positive"));
    }
    let layout = check_pair(student, teacher)?;
    let n = layout.positions as f64;
    let ts = if symmetric { temperature } else { 1.0 };
    let k = layout.classes;
    let mut grad = Tensor::zeros(student.shape());
    let (mut srow, mut trow) = (vec![0.0; k], vec![0.0; k]);
    let (mut logp, mut logq) = (vec![0.0; k], vec![0.0; k]);
    let mut total = 0.0;
    for pos in 0..layout.positions {
        layout.read(student.data(), pos, &mut srow);
        layout.read(teacher.data(), pos, &mut trow);
        log_softmax_row(&srow, ts, &mut logp);
        log_softmax_row(&trow, temperature, &mut logq);
        let kl: f64 = (0..k).map(|c| libm::exp(logp[c]) * (logp[c] - logq[c])).sum();
        total += kl;
        // d KL / d z_c = p_c (log p_c - log q_c - KL) / T_s
        let b = layout.base(pos);
        for c in 0..k {
            let p = libm::exp(logp[c]);
            grad.data_mut()[b + c * layout.stride()] = p * (logp[c] - logq[c] - kl) / (ts * n);
        }
    }
    Ok((total / n, grad))
}

fn term_value(
    term: LossTerm,
    cfg: &LossConfig,
    student: &Tensor,
    teacher: Option<&Tensor>,
    labels: &[usize],
) -> Result<(f64, Tensor)> {
    let need = || teacher.ok_or_else(|| config(format!("loss term {} needs teacher logits", term.name())));
    match term {
        LossTerm::Ce => ce_loss(student, labels),
        LossTerm::Mse => mse_pairing_loss(student, need()?),
        LossTerm::CePred => ce_pred_loss(student, need()?),
        LossTerm::Kd => kd_loss_with(student, need()?, cfg.temperature, cfg.kd_symmetric),
    }
}

/// Weighted sum of the active terms.
///
/// `weights` must name exactly the active terms and sum to one. Per-term
/// values are reported unweighted.
pub fn combined_loss(
    cfg: &LossConfig,
    weights: &Weights,
    student: &Tensor,
    teacher: Option<&Tensor>,
    labels: &[usize],
) -> Result<CombinedLoss> {
    weights.check_covers(&cfg.terms)?;
    let mut grad = Tensor::zeros(student.shape());
    let mut terms = TermValues::default();
    let mut value = 0.0;
    for &term in &cfg.terms {
        let (v, g) = term_value(term, cfg, student, teacher, labels)?;
        let w = weights.get(term).expect("coverage checked");
        terms.set(term, v);
        value += w * v;
        if w != 0.0 {
            for (acc, gv) in grad.data_mut().iter_mut().zip(g.data()) {
                *acc += w * gv;
            }
        }
    }
    Ok(CombinedLoss { value, terms, grad })
}

/// Runs the student (recording a tape) and, when any term needs it, the
/// teacher, then evaluates [`combined_loss`].
pub fn combined_loss_on_batch(
    cfg: &LossConfig,
    weights: &Weights,
    inputs: &Tensor,
    labels: &[usize],
    student: &Network,
    teacher: Option<&Network>,
) -> Result<(CombinedLoss, Tape)> {
    let (logits, tape) = autodiff::forward(student, inputs)?;
    let teacher_logits = match teacher {
        Some(t) if cfg.needs_teacher() => Some(autodiff::predict(t, inputs)?),
        _ => None,
    };
    let loss = combined_loss(cfg, weights, &logits, teacher_logits.as_ref(), labels)?;
    Ok((loss, tape))
}

/// Softmax probabilities of one logits row (helper for callers outside the crate).
pub fn probabilities(row: &[f64]) -> Vec<f64> {
    let mut r = row.to_vec();
    softmax_row(&mut r, 1.0);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weighting::{uniform_weights, Weights};
    use libm::{exp, log};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn ce_examples() {
        close(ce_loss(&Tensor::row(&[0.0; 4]), &[0]).unwrap().0, log(4.0), 1e-12);
        close(ce_loss(&Tensor::row(&[2.0, 0.0]), &[0]).unwrap().0, log(1.0 + exp(-2.0)), 1e-12);
        close(ce_loss(&Tensor::row(&[2.0, 0.0]), &[0]).unwrap().0, 0.12693, 1e-5);
        close(ce_loss(&Tensor::row(&[1000.0, 0.0]), &[0]).unwrap().0, 0.0, 1e-9);
        assert!(matches!(ce_loss(&Tensor::row(&[0.0, 0.0]), &[2]), Err(Error::Domain(_))));
    }

    #[test]
    fn mse_examples() {
        let s = Tensor::row(&[1.0, 2.0]);
        assert_eq!(mse_pairing_loss(&s, &s).unwrap().0, 0.0);
        assert_eq!(mse_pairing_loss(&s, &Tensor::row(&[0.0, 0.0])).unwrap().0, 5.0);
        let s2 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 3.0]]).unwrap();
        let t2 = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0]]).unwrap();
        let (v, g) = mse_pairing_loss(&s2, &t2).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 3.0]);
        assert!(mse_pairing_loss(&s, &t2).is_err());
    }

    #[test]
    fn ce_pred_examples() {
        let v = ce_pred_loss(&Tensor::row(&[0.0, 0.0]), &Tensor::row(&[5.0, 1.0])).unwrap().0;
        close(v, log(2.0), 1e-12);
        let confident = Tensor::row(&[50.0, 0.0, 0.0]);
        assert!(ce_pred_loss(&confident, &confident).unwrap().0 < 1e-12);
        // Tie between classes 0 and 1 picks class 0.
        let student = Tensor::row(&[0.3, -0.2, 0.1]);
        let tie = ce_pred_loss(&student, &Tensor::row(&[1.0, 1.0, 0.0])).unwrap();
        assert_eq!(tie, ce_loss(&student, &[0]).unwrap());
    }

    #[test]
    fn kd_examples() {
        let s = Tensor::row(&[0.4, -1.0, 2.0]);
        close(kd_loss(&s, &s, 1.0).unwrap().0, 0.0, 1e-15);

        let p = 0.5;
        let e = core::f64::consts::E;
        let q0 = e / (e + 1.0);
        let expected = p * log(p / q0) + p * log(p / (1.0 - q0));
        let v = kd_loss(&Tensor::row(&[0.0, 0.0]), &Tensor::row(&[2.0, 0.0]), 2.0).unwrap().0;
        close(v, expected, 1e-12);
        close(v, 0.12013, 1e-4);

        // Very high temperature: teacher is uniform, KL = ln C - H(p).
        let probs = probabilities(s.data());
        let entropy: f64 = -probs.iter().map(|p| p * log(*p)).sum::<f64>();
        let v = kd_loss(&s, &Tensor::row(&[9.0, -3.0, 1.0]), 1e6).unwrap().0;
        close(v, log(3.0) - entropy, 1e-4);

        assert!(kd_loss(&s, &s, 0.0).is_err());
    }

    #[test]
    fn symmetric_kd_tempers_the_student() {
        let s = Tensor::row(&[2.0, 0.0]);
        let t = Tensor::row(&[2.0, 0.0]);
        assert!(kd_loss_with(&s, &t, 2.0, false).unwrap().0 > 1e-3);
        close(kd_loss_with(&s, &t, 2.0, true).unwrap().0, 0.0, 1e-15);
    }

    #[test]
    fn per_pixel_losses_average_over_pixels() {
        // [1, 2, 1, 2]: two pixels, two classes.
        // Class planes: class 0 = [0, 2], class 1 = [0, 0].
        let s = Tensor::new(vec![1, 2, 1, 2], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        let (v, _) = ce_loss(&s, &[0, 0]).unwrap();
        close(v, (log(2.0) + log(1.0 + exp(-2.0))) / 2.0, 1e-12);
        let (v, _) = ce_loss(&s, &[0, 1]).unwrap();
        close(v, (log(2.0) + log(1.0 + exp(2.0))) / 2.0, 1e-12);
    }

    #[test]
    fn combined_examples() {
        let cfg = LossConfig::new(&[LossTerm::Ce, LossTerm::Mse, LossTerm::CePred]).unwrap();
        let s = Tensor::from_rows(&[&[0.5, -0.1, 0.2], &[1.0, 2.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[0.3, 0.2, 0.1]]).unwrap();
        let labels = [2, 1];

        let w = Weights::from_pairs(&[(LossTerm::Ce, 1.0), (LossTerm::Mse, 0.0), (LossTerm::CePred, 0.0)]);
        let c = combined_loss(&cfg, &w, &s, Some(&t), &labels).unwrap();
        let (ce, ce_g) = ce_loss(&s, &labels).unwrap();
        assert_eq!(c.value, ce);
        assert_eq!(c.grad, ce_g);

        // Teacher == student with argmax == label: MSE = 0 and CEPred = CE.
        let labels_self = [0, 1];
        let w = uniform_weights(&cfg.terms).unwrap();
        let c = combined_loss(&cfg, &w, &s, Some(&s), &labels_self).unwrap();
        let ce_self = ce_loss(&s, &labels_self).unwrap().0;
        close(c.value, 2.0 / 3.0 * ce_self, 1e-12);
        assert_eq!(c.terms.get(LossTerm::Mse), Some(0.0));

        let w = Weights::from_pairs(&[(LossTerm::Ce, 0.5), (LossTerm::Mse, 0.5)]);
        let cfg2 = LossConfig::new(&[LossTerm::Ce, LossTerm::Mse]).unwrap();
        let s1 = Tensor::row(&[1.0, 2.0]);
        let t1 = Tensor::row(&[0.0, 0.0]);
        let c = combined_loss(&cfg2, &w, &s1, Some(&t1), &[1]).unwrap();
        let ce1 = ce_loss(&s1, &[1]).unwrap().0;
        close(c.value, 0.5 * ce1 + 0.5 * 5.0, 1e-12);
    }

    #[test]
    fn combined_rejects_mismatched_weights() {
        let cfg = LossConfig::new(&[LossTerm::Ce, LossTerm::Mse]).unwrap();
        let s = Tensor::row(&[1.0, 2.0]);
        let only_ce = Weights::from_pairs(&[(LossTerm::Ce, 1.0)]);
        assert!(matches!(
            combined_loss(&cfg, &only_ce, &s, Some(&s), &[0]),
            Err(Error::Config(_))
        ));
        let not_simplex = Weights::from_pairs(&[(LossTerm::Ce, 0.7), (LossTerm::Mse, 0.7)]);
        assert!(combined_loss(&cfg, &not_simplex, &s, Some(&s), &[0]).is_err());
        let extra = Weights::from_pairs(&[(LossTerm::Ce, 0.5), (LossTerm::Mse, 0.25), (LossTerm::Kd, 0.25)]);
        assert!(combined_loss(&cfg, &extra, &s, Some(&s), &[0]).is_err());
    }

    #[test]
    fn config_rejects_duplicates_and_empty() {
        assert!(LossConfig::new(&[]).is_err());
        assert!(LossConfig::new(&[LossTerm::Ce, LossTerm::Ce]).is_err());
        assert!(LossConfig::new(&[LossTerm::Ce]).unwrap().with_temperature(-1.0).is_err());
    }
}
