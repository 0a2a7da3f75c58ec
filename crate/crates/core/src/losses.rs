//! Self-training loss terms, the confidence weighting factor, and their
//! weighted sum.
//!
//! Terms that act on student probability rows are differentiated with
//! respect to the logits those rows are the softmax of; terms on features
//! with respect to the student features. Teacher inputs are constants.

use serde::{Deserialize, Serialize};

use crate::detector::layers::softmax;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(pseudo ‖ student): teacher labels are the target distribution.
    PseudoToStudent,
    /// KL(student ‖ pseudo).
    StudentToPseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// w1..w6 in order: RPN, ROI, KL distillation, feature distillation,
    /// entropy, contrastive.
    pub rpn: f64,
    pub roi: f64,
    pub kl_distill: f64,
    pub feature_distill: f64,
    pub entropy: f64,
    pub contrastive: f64,
    pub gamma_e: f64,
    pub gamma_p: f64,
    pub factor_cap: f64,
    pub temperature: f64,
    pub kl_direction: KlDirection,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn: 1.0,
            roi: 1.0,
            kl_distill: 0.5,
            feature_distill: 0.5,
            entropy: 0.1,
            contrastive: 0.1,
            gamma_e: 0.1,
            gamma_p: 0.01,
            factor_cap: 4.0,
            temperature: 0.07,
            kl_direction: KlDirection::PseudoToStudent,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.rpn,
            self.roi,
            self.kl_distill,
            self.feature_distill,
            self.entropy,
            self.contrastive,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("rpn", self.rpn),
            ("roi", self.roi),
            ("kl_distill", self.kl_distill),
            ("feature_distill", self.feature_distill),
            ("entropy", self.entropy),
            ("contrastive", self.contrastive),
            ("gamma_e", self.gamma_e),
            ("gamma_p", self.gamma_p),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        if !(self.factor_cap >= 1.0 && self.factor_cap.is_finite()) {
            return Err(Error::Config("factor_cap must be finite and >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

pub const TERM_NAMES: [&str; 6] = ["rpn", "roi", "kl_distill", "feature_distill", "entropy", "contrastive"];

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rpn: f64,
    pub roi: f64,
    pub kl_distill: f64,
    pub feature_distill: f64,
    pub entropy: f64,
    pub contrastive: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.rpn,
            self.roi,
            self.kl_distill,
            self.feature_distill,
            self.entropy,
            self.contrastive,
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn: f64,
    pub roi: f64,
    pub kl_distill: f64,
    pub feature_distill: f64,
    pub entropy: f64,
    pub contrastive: f64,
    pub factor: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            rpn: self.rpn,
            roi: self.roi,
            kl_distill: self.kl_distill,
            feature_distill: self.feature_distill,
            entropy: self.entropy,
            contrastive: self.contrastive,
        }
    }
}

/// `factor · Σ wᵢ·partᵢ`. The gradient of the total with respect to part i
/// is `factor · wᵢ`.
pub fn total(parts: &LossParts, factor: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in TERM_NAMES.iter().zip(parts.as_array()) {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}")));
        }
    }
    if !factor.is_finite() {
        return Err(Error::Numeric(format!("weighting factor is {factor}")));
    }
    let sum: f64 = parts
        .as_array()
        .iter()
        .zip(weights.as_array())
        .map(|(p, w)| p * w)
        .sum();
    Ok(LossBreakdown {
        rpn: parts.rpn,
        roi: parts.roi,
        kl_distill: parts.kl_distill,
        feature_distill: parts.feature_distill,
        entropy: parts.entropy,
        contrastive: parts.contrastive,
        factor,
        total: factor * sum,
    })
}

fn check_rows(rows: &[Vec<f64>], what: &str) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-4 || r.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract(format!("{what} row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

const LOG_FLOOR: f64 = 1e-12;

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - b.max(LOG_FLOOR).ln()) } else { 0.0 })
        .sum()
}

/// Mean over rows of KL(pseudo ‖ student); 0 for no rows.
pub fn soft_kl_distill(student: &[Vec<f64>], pseudo: &[Vec<f64>]) -> Result<f64> {
    soft_kl_distill_directed(student, pseudo, KlDirection::PseudoToStudent)
}

pub fn soft_kl_distill_directed(student: &[Vec<f64>], pseudo: &[Vec<f64>], dir: KlDirection) -> Result<f64> {
    if student.len() != pseudo.len() {
        return Err(Error::Contract(format!(
            "{} student rows vs {} pseudo rows",
            student.len(),
            pseudo.len()
        )));
    }
    check_rows(student, "student")?;
    check_rows(pseudo, "pseudo label")?;
    if student.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = student
        .iter()
        .zip(pseudo)
        .map(|(q, p)| match dir {
            KlDirection::PseudoToStudent => kl(p, q),
            KlDirection::StudentToPseudo => kl(q, p),
        })
        .sum();
    Ok(sum / student.len() as f64)
}

/// KL distillation on student logits; returns `(value, d value / d logits)`.
pub fn soft_kl_distill_logits(
    logits: &[Vec<f64>],
    pseudo: &[Vec<f64>],
    dir: KlDirection,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let student: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let value = soft_kl_distill_directed(&student, pseudo, dir)?;
    let n = logits.len().max(1) as f64;
    let grad = student
        .iter()
        .zip(pseudo)
        .map(|(q, p)| match dir {
            KlDirection::PseudoToStudent => q.iter().zip(p).map(|(qi, pi)| (qi - pi) / n).collect(),
            KlDirection::StudentToPseudo => {
                let g: Vec<f64> = q
                    .iter()
                    .zip(p)
                    .map(|(qi, pi)| qi.max(LOG_FLOOR).ln() - pi.max(LOG_FLOOR).ln())
                    .collect();
                let f: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
                q.iter().zip(&g).map(|(qi, gi)| qi * (gi - f) / n).collect()
            }
        })
        .collect();
    Ok((value, grad))
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("feature dimensions differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean squared difference of the pooled image vectors.
pub fn feature_distill(teacher: &[f64], student: &[f64]) -> Result<f64> {
    Ok(feature_distill_grad(teacher, student)?.0)
}

/// `(value, d value / d student)`.
pub fn feature_distill_grad(teacher: &[f64], student: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dims(teacher, student)?;
    if student.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let d = student.len() as f64;
    let value = student.iter().zip(teacher).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / d;
    let grad = student.iter().zip(teacher).map(|(s, t)| 2.0 * (s - t) / d).collect();
    Ok((value, grad))
}

fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

/// Mean Shannon entropy of probability rows; 0 for no rows.
pub fn entropy_loss(rows: &[Vec<f64>]) -> Result<f64> {
    check_rows(rows, "entropy input")?;
    Ok(mean_entropy(rows))
}

fn mean_entropy(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| row_entropy(r)).sum::<f64>() / rows.len() as f64
}

/// Entropy on student logits; returns `(value, d value / d logits)`.
pub fn entropy_logits(logits: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let n = logits.len().max(1) as f64;
    let grad = probs
        .iter()
        .map(|p| {
            let h = row_entropy(p);
            p.iter().map(|&pk| -(xlogx(pk) + pk * h) / n).collect()
        })
        .collect();
    (mean_entropy(&probs), grad)
}

fn normalise(rows: &[Vec<f64>], what: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut out = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::Contract(format!("{what} row {i} has zero norm")));
        }
        out.push(r.iter().map(|v| v / n).collect());
        norms.push(n);
    }
    Ok((out, norms))
}

/// Symmetric InfoNCE over cosine similarities; row i of each matrix is the
/// same region. Returns `(value, d value / d student rows)`.
///
/// The loss is the average of the student→teacher and teacher→student
/// cross-entropies, each averaged over rows. One row gives 0.
pub fn contrastive_grad(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let m = student.len();
    if teacher.len() != m {
        return Err(Error::Contract(format!("{} teacher vs {m} student regions", teacher.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    if m == 0 {
        return Ok((0.0, Vec::new()));
    }
    for (t, s) in teacher.iter().zip(student) {
        check_dims(t, s)?;
    }
    let (t_hat, _) = normalise(teacher, "teacher region")?;
    let (s_hat, s_norm) = normalise(student, "student region")?;
    let sim: Vec<Vec<f64>> = s_hat
        .iter()
        .map(|s| t_hat.iter().map(|t| s.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / temperature).collect())
        .collect();
    let mf = m as f64;
    let mut value = 0.0;
    let mut dsim = vec![vec![0.0; m]; m];
    for i in 0..m {
        let p = softmax(&sim[i]);
        value -= p[i].max(f64::MIN_POSITIVE).ln() / (2.0 * mf);
        for j in 0..m {
            dsim[i][j] += (p[j] - f64::from(i == j)) / (2.0 * mf);
        }
    }
    for j in 0..m {
        let col: Vec<f64> = (0..m).map(|i| sim[i][j]).collect();
        let p = softmax(&col);
        value -= p[j].max(f64::MIN_POSITIVE).ln() / (2.0 * mf);
        for i in 0..m {
            dsim[i][j] += (p[i] - f64::from(i == j)) / (2.0 * mf);
        }
    }
    let d = student[0].len();
    let grad = (0..m)
        .map(|i| {
            let g: Vec<f64> = (0..d)
                .map(|k| (0..m).map(|j| dsim[i][j] * t_hat[j][k]).sum::<f64>() / temperature)
                .collect();
            let dot: f64 = g.iter().zip(&s_hat[i]).map(|(a, b)| a * b).sum();
            g.iter()
                .zip(&s_hat[i])
                .map(|(gk, sk)| (gk - sk * dot) / s_norm[i])
                .collect()
        })
        .collect();
    Ok((value, grad))
}

pub fn contrastive_loss(teacher: &[Vec<f64>], student: &[Vec<f64>], temperature: f64) -> Result<f64> {
    Ok(contrastive_grad(teacher, student, temperature)?.0)
}

/// `(1 + γe·H̄(dyn_soft)) · (1 + γp·pseudo_count)` clamped to `[1, factor_cap]`,
/// where H̄ is the mean row entropy of the dynamic teacher's soft labels.
pub fn weight_factor(dyn_soft: &[Vec<f64>], pseudo_count: usize, weights: &LossWeights) -> f64 {
    factor_from_entropy(mean_entropy(dyn_soft), pseudo_count, weights)
}

/// [`weight_factor`] given the mean entropy directly.
pub fn factor_from_entropy(entropy: f64, pseudo_count: usize, weights: &LossWeights) -> f64 {
    let raw = (1.0 + weights.gamma_e * entropy) * (1.0 + weights.gamma_p * pseudo_count as f64);
    raw.clamp(1.0, weights.factor_cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let kl = soft_kl_distill(&[vec![0.5, 0.5]], &[vec![1.0, 0.0]]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(soft_kl_distill(&[vec![0.3, 0.7]], &[vec![0.3, 0.7]]).unwrap(), 0.0);
        assert_eq!(soft_kl_distill(&[], &[]).unwrap(), 0.0);
        assert!((feature_distill(&[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(entropy_loss(&[vec![0.0, 1.0, 0.0]]).unwrap(), 0.0);
        assert!((entropy_loss(&[vec![0.25; 4]]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(contrastive_loss(&[vec![1.0, 2.0]], &[vec![0.3, 0.1]], 0.07).unwrap(), 0.0);
    }

    #[test]
    fn factor_formula_and_clamp() {
        let w = LossWeights::default();
        assert_eq!(weight_factor(&[], 0, &w), 1.0);
        assert!((factor_from_entropy(1.0, 10, &w) - 1.21).abs() < 1e-12);
        assert_eq!(weight_factor(&[vec![1.0, 0.0]], 1_000_000, &w), 4.0);
    }

    #[test]
    fn contract_violations() {
        assert!(soft_kl_distill(&[vec![0.5, 0.6]], &[vec![0.5, 0.5]]).is_err());
        assert!(feature_distill(&[1.0], &[1.0, 2.0]).is_err());
        assert!(contrastive_loss(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).is_err());
        let parts = LossParts {
            entropy: f64::NAN,
            ..Default::default()
        };
        let err = total(&parts, 1.0, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("entropy"));
    }

    #[test]
    fn total_examples() {
        let ones = LossParts {
            rpn: 1.0,
            roi: 1.0,
            kl_distill: 1.0,
            feature_distill: 1.0,
            entropy: 1.0,
            contrastive: 1.0,
        };
        let unit = LossWeights {
            rpn: 1.0,
            roi: 1.0,
            kl_distill: 1.0,
            feature_distill: 1.0,
            entropy: 1.0,
            contrastive: 1.0,
            ..Default::default()
        };
        assert_eq!(total(&ones, 1.0, &unit).unwrap().total, 6.0);
        let zero = LossWeights {
            rpn: 0.0,
            roi: 0.0,
            kl_distill: 0.0,
            feature_distill: 0.0,
            entropy: 0.0,
            contrastive: 0.0,
            ..Default::default()
        };
        assert_eq!(total(&ones, 3.0, &zero).unwrap().total, 0.0);
    }
}
