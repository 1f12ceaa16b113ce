//! The re-weighted cross-entropy family.
//!
//! Every member has the form
//!
//! ```text
//! L = (1/N) * sum_i  w[y_i] * m_i * CE_i
//! ```
//!
//! where `w` is a per-class weight (1 for the unweighted families) and `m_i` a
//! per-point modulator:
//!
//! | family        | `w`        | `m_i`                        |
//! |---------------|------------|------------------------------|
//! | `ce`          | 1          | 1                            |
//! | `focal`       | 1          | `(1 - p_t)^gamma_f`          |
//! | `cb`          | CB weight  | 1                            |
//! | `cb_focal`    | CB weight  | `(1 - p_t)^gamma_f`          |
//! | `density_cb`  | CB weight  | `1 / (1 + ln dbar[y_i])`     |
//! | `boundary_cb` | CB weight  | `1 + alpha * H_i`            |
//! | `combined`    | CB weight  | `1 / (1 + ln dbar) * (1 + alpha * H_i)` |
//!
//! `H_i` is the entropy of the mean predicted distribution over the
//! k-neighbourhood of point `i`. Gradients are taken with respect to the
//! logits. By default `H_i` is treated as a constant weight; with
//! `entropy_detached = false` the gradient also flows through it.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::spatial::Neighborhoods;
use crate::stats::{WeightNorm, DEFAULT_BETA, DEFAULT_RADIUS};

/// Probabilities are clamped here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossFamily {
    Ce,
    Focal,
    Cb,
    CbFocal,
    DensityCb,
    BoundaryCb,
    Combined,
}

impl LossFamily {
    pub const ALL: [LossFamily; 7] = [
        LossFamily::Ce,
        LossFamily::Focal,
        LossFamily::Cb,
        LossFamily::CbFocal,
        LossFamily::DensityCb,
        LossFamily::BoundaryCb,
        LossFamily::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossFamily::Ce => "ce",
            LossFamily::Focal => "focal",
            LossFamily::Cb => "cb",
            LossFamily::CbFocal => "cb_focal",
            LossFamily::DensityCb => "density_cb",
            LossFamily::BoundaryCb => "boundary_cb",
            LossFamily::Combined => "combined",
        }
    }

    pub fn uses_class_weights(self) -> bool {
        !matches!(self, LossFamily::Ce | LossFamily::Focal)
    }

    pub fn uses_focal(self) -> bool {
        matches!(self, LossFamily::Focal | LossFamily::CbFocal)
    }

    pub fn uses_density(self) -> bool {
        matches!(self, LossFamily::DensityCb | LossFamily::Combined)
    }

    pub fn uses_entropy(self) -> bool {
        matches!(self, LossFamily::BoundaryCb | LossFamily::Combined)
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s.trim())
            .ok_or_else(|| Error::Usage(format!("unknown loss family '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub family: LossFamily,
    pub beta: f64,
    pub focal_gamma: f64,
    pub alpha: f64,
    pub k: usize,
    pub radius: f64,
    pub entropy_detached: bool,
    /// Whether a point belongs to its own k-neighbourhood.
    pub include_self: bool,
    pub weight_norm: WeightNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            family: LossFamily::Ce,
            beta: DEFAULT_BETA,
            focal_gamma: 2.0,
            alpha: 1.0,
            k: 64,
            radius: DEFAULT_RADIUS,
            entropy_detached: true,
            include_self: true,
            weight_norm: WeightNorm::PointMean,
        }
    }
}

impl LossConfig {
    pub fn new(family: LossFamily) -> Self {
        LossConfig {
            family,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::domain(format!(
                "beta must lie in [0, 1), got {}",
                self.beta
            )));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::domain(format!(
                "focal exponent must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::domain(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.k == 0 {
            return Err(Error::domain("k must be at least 1"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::domain(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Per-point factors of the last evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PerPointLossBreakdown {
    pub base_ce: Vec<f64>,
    pub class_weight: Vec<f64>,
    pub modulator: Vec<f64>,
    /// Neighbourhood entropy, for the entropy-modulated families.
    pub entropy: Option<Vec<f64>>,
    /// Batch mean of `class_weight * modulator * base_ce`.
    pub total: f64,
}

impl PerPointLossBreakdown {
    /// `point,label,base_ce,class_weight,modulator,entropy,term` rows.
    pub fn to_csv(&self, labels: &[u16]) -> String {
        let mut out = String::from("point,label,base_ce,class_weight,modulator,entropy,term\n");
        for i in 0..self.base_ce.len() {
            let h = self
                .entropy
                .as_ref()
                .map_or_else(|| "NA".to_string(), |h| format!("{}", h[i]));
            let term = self.class_weight[i] * self.modulator[i] * self.base_ce[i];
            writeln!(
                out,
                "{i},{},{},{},{},{h},{term}",
                labels[i], self.base_ce[i], self.class_weight[i], self.modulator[i]
            )
            .unwrap();
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Row-major `N x C` gradient of `loss` with respect to the logits.
    pub grad: Vec<f64>,
    pub breakdown: PerPointLossBreakdown,
}

/// Precomputed statistics a family may read.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossInputs<'a> {
    /// Per-class weights; `None` means all ones.
    pub class_weights: Option<&'a [f64]>,
    /// Per-class density modulators `gamma(dbar_c)`.
    pub density_modulators: Option<&'a [f64]>,
    /// Batch-local k-neighbourhoods.
    pub neighborhoods: Option<&'a Neighborhoods>,
}

/// A row-major batch of logits.
#[derive(Clone, Copy, Debug)]
pub struct LogitBatch<'a> {
    pub values: &'a [f64],
    pub classes: usize,
}

impl<'a> LogitBatch<'a> {
    pub fn new(values: &'a [f64], classes: usize) -> Result<Self> {
        if classes == 0 || !values.len().is_multiple_of(classes) {
            return Err(Error::domain(format!(
                "{} logits do not form rows of {classes} classes",
                values.len()
            )));
        }
        Ok(LogitBatch { values, classes })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }
}

/// Log-sum-exp of a logit row via the max-shift.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Cross-entropy of one logit row and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::domain(format!(
            "label {label} outside 0..{}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite logit"));
    }
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// `(1 - p_t)^gamma_f`; exactly 1 when `gamma_f == 0`.
pub fn focal_modulator(p_t: f64, gamma_f: f64) -> f64 {
    (1.0 - p_t).max(0.0).powf(gamma_f)
}

/// Mean predicted distribution over each point's neighbourhood.
pub fn neighborhood_probabilities(
    probs: &[f64],
    classes: usize,
    neighborhoods: &Neighborhoods,
    exec: Exec,
) -> Result<Vec<f64>> {
    let n = probs.len() / classes;
    if neighborhoods.len() != n {
        return Err(Error::domain(format!(
            "{} neighbourhoods for a batch of {n} points",
            neighborhoods.len()
        )));
    }
    for i in 0..n {
        if let Some(&j) = neighborhoods.row(i).iter().find(|&&j| j >= n) {
            return Err(Error::domain(format!(
                "neighbour id {j} of point {i} lies outside the batch of {n}"
            )));
        }
    }
    let k = neighborhoods.k() as f64;
    let mut out = vec![0.0; probs.len()];
    par::for_each_chunk_mut(exec, &mut out, ROW_CHUNK * classes, |chunk_idx, chunk| {
        for (r, row) in chunk.chunks_mut(classes).enumerate() {
            let i = chunk_idx * ROW_CHUNK + r;
            for &j in neighborhoods.row(i) {
                for (acc, p) in row.iter_mut().zip(&probs[j * classes..(j + 1) * classes]) {
                    *acc += p;
                }
            }
            for v in row.iter_mut() {
                *v /= k;
            }
        }
    });
    Ok(out)
}

/// Shannon entropy in nats with `0 ln 0 = 0`; probabilities are floored at
/// [`PROB_FLOOR`] before the logarithm.
pub fn neighborhood_entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.max(PROB_FLOOR).ln())
        .sum();
    h.max(0.0)
}

#[derive(Clone, Copy, Debug, Default)]
struct PointTerm {
    ce: f64,
    weight: f64,
    modulator: f64,
    /// `d(term)/dz = coeff * (softmax - onehot)` for the detached part.
    coeff: f64,
}

/// Evaluates a configured family on one batch.
pub fn evaluate(
    config: &LossConfig,
    logits: LogitBatch<'_>,
    labels: &[u16],
    inputs: LossInputs<'_>,
    exec: Exec,
) -> Result<LossOutput> {
    config.validate()?;
    let family = config.family;
    let c = logits.classes;
    let n = logits.len();
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    if labels.len() != n {
        return Err(Error::domain(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::domain(format!("label {l} outside 0..{c}")));
    }
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite logit"));
    }
    let class_weights = if family.uses_class_weights() {
        let w = inputs
            .class_weights
            .ok_or_else(|| Error::domain(format!("{family} needs class weights")))?;
        if w.len() != c || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain(
                "class weights must be C finite non-negative values",
            ));
        }
        Some(w)
    } else {
        None
    };
    let density = if family.uses_density() {
        let g = inputs
            .density_modulators
            .ok_or_else(|| Error::domain(format!("{family} needs density modulators")))?;
        if g.len() != c || g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::domain(
                "density modulators must be C positive values",
            ));
        }
        Some(g)
    } else {
        None
    };

    // Pass 1: log-partition per row, then probabilities.
    let lse = par::map_indices(exec, n, |i| log_sum_exp(logits.row(i)));
    let mut probs = vec![0.0; n * c];
    par::for_each_chunk_mut(exec, &mut probs, ROW_CHUNK * c, |ci, chunk| {
        for (r, row) in chunk.chunks_mut(c).enumerate() {
            let i = ci * ROW_CHUNK + r;
            for (p, z) in row.iter_mut().zip(logits.row(i)) {
                *p = (z - lse[i]).exp();
            }
        }
    });

    // Pass 2: neighbourhood entropy.
    let mut mean_probs = None;
    let entropy = if family.uses_entropy() {
        let nb = inputs
            .neighborhoods
            .ok_or_else(|| Error::domain(format!("{family} needs neighbourhoods")))?;
        let avg = neighborhood_probabilities(&probs, c, nb, exec)?;
        let h = par::map_indices(exec, n, |i| neighborhood_entropy(&avg[i * c..(i + 1) * c]));
        mean_probs = Some(avg);
        Some(h)
    } else {
        None
    };

    // Pass 3: per-point factors and gradient coefficients.
    let gamma_f = config.focal_gamma;
    let terms = par::map_indices(exec, n, |i| {
        let t = labels[i] as usize;
        let row = &probs[i * c..(i + 1) * c];
        let ce = lse[i] - logits.row(i)[t];
        let weight = class_weights.map_or(1.0, |w| w[t]);
        let mut modulator = 1.0;
        let mut coeff_factor = 1.0;
        if family.uses_focal() {
            let p_t = row[t];
            // 1 - p_t from the other classes keeps precision when p_t -> 1.
            let q: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != t)
                .map(|(_, p)| p)
                .sum();
            modulator = q.powf(gamma_f);
            // d/dz [q^g * ce] = (q^g + g p_t q^(g-1) ce) * (softmax - onehot)
            let tail = if gamma_f == 0.0 || q == 0.0 {
                0.0
            } else {
                gamma_f * p_t * q.powf(gamma_f - 1.0) * ce
            };
            coeff_factor = modulator + tail;
        }
        if let Some(g) = density {
            modulator *= g[t];
            coeff_factor *= g[t];
        }
        if let Some(h) = &entropy {
            let m = 1.0 + config.alpha * h[i];
            modulator *= m;
            coeff_factor *= m;
        }
        PointTerm {
            ce,
            weight,
            modulator,
            coeff: weight * coeff_factor,
        }
    });

    let inv_n = 1.0 / n as f64;
    let values: Vec<f64> = terms
        .iter()
        .map(|t| t.weight * t.modulator * t.ce)
        .collect();
    let loss = par::pairwise_sum(&values) * inv_n;

    // Pass 4: gradient rows.
    let mut grad = probs;
    par::for_each_chunk_mut(exec, &mut grad, ROW_CHUNK * c, |ci, chunk| {
        for (r, row) in chunk.chunks_mut(c).enumerate() {
            let i = ci * ROW_CHUNK + r;
            let a = terms[i].coeff * inv_n;
            row[labels[i] as usize] -= 1.0;
            for v in row.iter_mut() {
                *v *= a;
            }
        }
    });

    if let (Some(avg), false) = (&mean_probs, config.entropy_detached) {
        add_entropy_gradient(
            &mut grad,
            &terms,
            avg,
            &lse,
            logits,
            inputs.neighborhoods.expect("checked above"),
            config.alpha,
            density.map(|g| (g, labels)),
            inv_n,
        );
    }

    let breakdown = PerPointLossBreakdown {
        base_ce: terms.iter().map(|t| t.ce).collect(),
        class_weight: terms.iter().map(|t| t.weight).collect(),
        modulator: terms.iter().map(|t| t.modulator).collect(),
        entropy,
        total: loss,
    };
    Ok(LossOutput {
        loss,
        grad,
        breakdown,
    })
}

/// Adds the part of the gradient that flows through `H_i` into the logits of
/// every neighbour of `i`.
#[allow(clippy::too_many_arguments)]
fn add_entropy_gradient(
    grad: &mut [f64],
    terms: &[PointTerm],
    mean_probs: &[f64],
    lse: &[f64],
    logits: LogitBatch<'_>,
    nb: &Neighborhoods,
    alpha: f64,
    density: Option<(&[f64], &[u16])>,
    inv_n: f64,
) {
    let c = logits.classes;
    let n = logits.len();
    let k = nb.k() as f64;
    // upstream[m][c] = dL/d softmax_m[c] through the entropies of points whose
    // neighbourhood contains m.
    let mut upstream = vec![0.0; n * c];
    for i in 0..n {
        let g_density = density.map_or(1.0, |(g, labels)| g[labels[i] as usize]);
        let scale = alpha * terms[i].weight * g_density * terms[i].ce * inv_n / k;
        if scale == 0.0 {
            continue;
        }
        let avg = &mean_probs[i * c..(i + 1) * c];
        for &m in nb.row(i) {
            let up = &mut upstream[m * c..(m + 1) * c];
            for (u, &p) in up.iter_mut().zip(avg) {
                // dH/dp = -(ln p + 1); the constant drops out under the softmax Jacobian.
                *u -= scale * p.max(PROB_FLOOR).ln();
            }
        }
    }
    for m in 0..n {
        let z = logits.row(m);
        let up = &upstream[m * c..(m + 1) * c];
        let s: Vec<f64> = z.iter().map(|v| (v - lse[m]).exp()).collect();
        let dot: f64 = up.iter().zip(&s).map(|(u, p)| u * p).sum();
        for j in 0..c {
            grad[m * c + j] += s[j] * (up[j] - dot);
        }
    }
}

/// Class-balanced cross-entropy.
pub fn cb_loss(
    logits: LogitBatch<'_>,
    labels: &[u16],
    class_weights: &[f64],
    exec: Exec,
) -> Result<LossOutput> {
    evaluate(
        &LossConfig::new(LossFamily::Cb),
        logits,
        labels,
        LossInputs {
            class_weights: Some(class_weights),
            ..LossInputs::default()
        },
        exec,
    )
}

/// Class-balanced cross-entropy with per-class density modulators.
pub fn density_cb_loss(
    logits: LogitBatch<'_>,
    labels: &[u16],
    class_weights: &[f64],
    density_modulators: &[f64],
    exec: Exec,
) -> Result<LossOutput> {
    evaluate(
        &LossConfig::new(LossFamily::DensityCb),
        logits,
        labels,
        LossInputs {
            class_weights: Some(class_weights),
            density_modulators: Some(density_modulators),
            neighborhoods: None,
        },
        exec,
    )
}

/// Class-balanced cross-entropy with the `(1 + alpha H_i)` boundary modulator
/// (entropy detached).
pub fn boundary_cb_loss(
    logits: LogitBatch<'_>,
    labels: &[u16],
    class_weights: &[f64],
    neighborhoods: &Neighborhoods,
    alpha: f64,
    exec: Exec,
) -> Result<LossOutput> {
    let config = LossConfig {
        alpha,
        k: neighborhoods.k(),
        ..LossConfig::new(LossFamily::BoundaryCb)
    };
    evaluate(
        &config,
        logits,
        labels,
        LossInputs {
            class_weights: Some(class_weights),
            density_modulators: None,
            neighborhoods: Some(neighborhoods),
        },
        exec,
    )
}

/// Both modulators multiplied together.
pub fn combined_loss(
    logits: LogitBatch<'_>,
    labels: &[u16],
    class_weights: &[f64],
    density_modulators: &[f64],
    neighborhoods: &Neighborhoods,
    alpha: f64,
    exec: Exec,
) -> Result<LossOutput> {
    let config = LossConfig {
        alpha,
        k: neighborhoods.k(),
        ..LossConfig::new(LossFamily::Combined)
    };
    evaluate(
        &config,
        logits,
        labels,
        LossInputs {
            class_weights: Some(class_weights),
            density_modulators: Some(density_modulators),
            neighborhoods: Some(neighborhoods),
        },
        exec,
    )
}
