//! Per-class long-tailed statistics: counts, effective numbers, class-balanced
//! weights, radius densities, density modulators and the frequency partition.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::pointcloud::{ClassPartition, Group, LabeledPointCloud};
use crate::spatial::SpatialIndex;

pub const DEFAULT_BETA: f64 = 0.9999;
pub const DEFAULT_RADIUS: f64 = 0.2;
pub const DEFAULT_HEAD_FRACTION: f64 = 0.15;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.03;

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::domain(format!(
            "beta must lie in [0, 1), got {beta}"
        )));
    }
    Ok(())
}

pub fn class_counts(cloud: &LabeledPointCloud) -> Vec<u64> {
    let mut counts = vec![0u64; cloud.num_classes()];
    for &l in cloud.labels() {
        counts[l as usize] += 1;
    }
    counts
}

/// Effective number of samples `(1 - beta^n) / (1 - beta)`.
///
/// `beta^n` is evaluated as `exp(n ln beta)` through `expm1`/`ln_1p`, which
/// stays accurate both for tiny `n (1 - beta)` and when `beta^n` underflows.
/// Once `n (1 - beta) > 40` the result sits within 1e-15 relative of the
/// ceiling `1 / (1 - beta)`.
pub fn effective_number(n: u64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(match n {
        0 => 0.0,
        1 => 1.0,
        _ if beta == 0.0 => 1.0,
        _ => {
            let one_minus = 1.0 - beta;
            let exponent = n as f64 * (-one_minus).ln_1p();
            -exponent.exp_m1() / one_minus
        }
    })
}

/// Class-balanced weight `1 / E(n)`; undefined for an absent class.
pub fn cb_weight(n: u64, beta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain(
            "class-balanced weight is undefined for n = 0",
        ));
    }
    Ok(1.0 / effective_number(n, beta)?)
}

/// CB weights per class; absent classes get weight 0.
pub fn class_weights(counts: &[u64], beta: f64) -> Result<Vec<f64>> {
    counts
        .iter()
        .map(|&n| if n == 0 { Ok(0.0) } else { cb_weight(n, beta) })
        .collect()
}

/// Rescaling applied to CB weights before they enter a training loss.
///
/// The raw weights `1/E_c` are of order `1 - beta`, which shrinks the loss
/// (and hence the effective step size) by orders of magnitude relative to
/// plain cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightNorm {
    /// Raw `1/E_c`.
    None,
    /// Scale so the point-weighted mean weight is 1: `sum_c n_c w_c = N`.
    #[default]
    PointMean,
    /// Scale so the weights of present classes sum to their number.
    ClassSum,
}

impl WeightNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightNorm::None => "none",
            WeightNorm::PointMean => "point_mean",
            WeightNorm::ClassSum => "class_sum",
        }
    }
}

impl FromStr for WeightNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(WeightNorm::None),
            "point_mean" => Ok(WeightNorm::PointMean),
            "class_sum" => Ok(WeightNorm::ClassSum),
            other => Err(Error::Usage(format!(
                "unknown weight normalisation '{other}'"
            ))),
        }
    }
}

pub fn normalize_weights(weights: &[f64], counts: &[u64], norm: WeightNorm) -> Vec<f64> {
    let scale = match norm {
        WeightNorm::None => 1.0,
        WeightNorm::PointMean => {
            let n: u64 = counts.iter().sum();
            let mass: f64 = weights.iter().zip(counts).map(|(w, &c)| w * c as f64).sum();
            if mass > 0.0 {
                n as f64 / mass
            } else {
                1.0
            }
        }
        WeightNorm::ClassSum => {
            let present = counts.iter().filter(|&&c| c > 0).count();
            let sum: f64 = weights.iter().sum();
            if sum > 0.0 {
                present as f64 / sum
            } else {
                1.0
            }
        }
    };
    weights.iter().map(|w| w * scale).collect()
}

/// Number of points within `r` of `point_id`, the point itself included.
pub fn local_density(index: &SpatialIndex, point_id: usize, r: f64) -> Result<usize> {
    index.radius_count(point_id, r)
}

/// Mean radius density per class; `None` for classes with no points.
pub fn class_mean_density(
    cloud: &LabeledPointCloud,
    index: &SpatialIndex,
    r: f64,
    exec: Exec,
) -> Result<Vec<Option<f64>>> {
    if index.len() != cloud.len() {
        return Err(Error::domain("index was built over a different cloud"));
    }
    let densities = index.radius_counts(exec, r)?;
    Ok(mean_by_class(cloud, &densities))
}

pub(crate) fn mean_by_class(cloud: &LabeledPointCloud, values: &[usize]) -> Vec<Option<f64>> {
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); cloud.num_classes()];
    for (&l, &d) in cloud.labels().iter().zip(values) {
        per_class[l as usize].push(d as f64);
    }
    per_class
        .iter()
        .map(|v| (!v.is_empty()).then(|| par::pairwise_sum(v) / v.len() as f64))
        .collect()
}

/// `1 / (1 + ln d)`, in (0, 1] for `d >= 1`.
pub fn density_modulator(mean_density: f64) -> Result<f64> {
    if mean_density.is_nan() || mean_density < 1.0 {
        return Err(Error::domain(format!(
            "mean density must be >= 1, got {mean_density}"
        )));
    }
    Ok(1.0 / (1.0 + mean_density.ln()))
}

/// How classes are assigned to head/common/tail.
#[derive(Clone, Debug, PartialEq)]
pub enum PartitionRule {
    /// Tail if `n_c / N < tail`, head if `n_c / N >= head`, otherwise common.
    Thresholds { head: f64, tail: f64 },
    /// One group per class id, taken verbatim.
    Explicit(Vec<Group>),
}

impl Default for PartitionRule {
    fn default() -> Self {
        PartitionRule::Thresholds {
            head: DEFAULT_HEAD_FRACTION,
            tail: DEFAULT_TAIL_FRACTION,
        }
    }
}

pub fn partition_classes(counts: &[u64], head: f64, tail: f64) -> Result<ClassPartition> {
    if !(tail > 0.0 && tail < head && head < 1.0) {
        return Err(Error::domain(format!(
            "partition thresholds need 0 < tail < head < 1, got tail={tail} head={head}"
        )));
    }
    let total: u64 = counts.iter().sum();
    let groups: Vec<Group> = counts
        .iter()
        .map(|&n| {
            let frac = if total == 0 {
                0.0
            } else {
                n as f64 / total as f64
            };
            if frac < tail {
                Group::Tail
            } else if frac >= head {
                Group::Head
            } else {
                Group::Common
            }
        })
        .collect();
    Ok(ClassPartition::from_groups(&groups))
}

pub fn apply_partition_rule(counts: &[u64], rule: &PartitionRule) -> Result<ClassPartition> {
    match rule {
        PartitionRule::Thresholds { head, tail } => partition_classes(counts, *head, *tail),
        PartitionRule::Explicit(groups) => {
            if groups.len() != counts.len() {
                return Err(Error::domain(format!(
                    "explicit partition lists {} classes, data has {}",
                    groups.len(),
                    counts.len()
                )));
            }
            Ok(ClassPartition::from_groups(groups))
        }
    }
}

/// Everything the loss family needs to know about the class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    pub effective: Vec<f64>,
    pub weights: Vec<f64>,
    pub mean_density: Vec<Option<f64>>,
    pub density_modulator: Vec<Option<f64>>,
    pub beta: f64,
    pub radius: f64,
    pub partition: ClassPartition,
}

impl ClassStats {
    pub fn compute(
        cloud: &LabeledPointCloud,
        index: &SpatialIndex,
        beta: f64,
        radius: f64,
        rule: &PartitionRule,
        exec: Exec,
    ) -> Result<Self> {
        let counts = class_counts(cloud);
        let effective = counts
            .iter()
            .map(|&n| effective_number(n, beta))
            .collect::<Result<Vec<_>>>()?;
        let weights = class_weights(&counts, beta)?;
        let mean_density = class_mean_density(cloud, index, radius, exec)?;
        let density_modulator = mean_density
            .iter()
            .map(|d| d.map(density_modulator).transpose())
            .collect::<Result<Vec<_>>>()?;
        let partition = apply_partition_rule(&counts, rule)?;
        Ok(ClassStats {
            counts,
            effective,
            weights,
            mean_density,
            density_modulator,
            beta,
            radius,
            partition,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Density modulators with absent classes mapped to 1.
    pub fn modulators_or_one(&self) -> Vec<f64> {
        self.density_modulator
            .iter()
            .map(|g| g.unwrap_or(1.0))
            .collect()
    }

    /// `class,count,effective,weight,mean_density,modulator,group` rows.
    pub fn report(&self) -> String {
        let mut out = String::from("class,count,effective,weight,mean_density,modulator,group\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
        for c in 0..self.num_classes() {
            let group = self.partition.group_of(c).map_or("none", |g| g.as_str());
            writeln!(
                out,
                "{c},{},{},{},{},{},{group}",
                self.counts[c],
                self.effective[c],
                self.weights[c],
                opt(self.mean_density[c]),
                opt(self.density_modulator[c]),
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Point;

    fn series(n: u64, beta: f64) -> f64 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for _ in 0..n {
            sum += term;
            term *= beta;
        }
        sum
    }

    #[test]
    fn counts() {
        let c = LabeledPointCloud::new(vec![[0.0; 3]; 3], vec![0, 1, 0], 2).unwrap();
        assert_eq!(class_counts(&c), vec![2, 1]);
        let e = LabeledPointCloud::new(vec![], vec![], 3).unwrap();
        assert_eq!(class_counts(&e), vec![0, 0, 0]);
    }

    #[test]
    fn effective_number_examples() {
        for beta in [0.0, 0.5, 0.9999] {
            assert_eq!(effective_number(1, beta).unwrap(), 1.0);
            assert_eq!(effective_number(0, beta).unwrap(), 0.0);
        }
        assert!((effective_number(100, 0.99).unwrap() - 63.397).abs() < 1e-3);
        assert!((effective_number(100, 0.99).unwrap() - series(100, 0.99)).abs() < 1e-9);
        assert!(effective_number(10, 1.0).is_err());
        assert!(effective_number(10, -0.1).is_err());
    }

    #[test]
    fn effective_number_ceiling() {
        let e = effective_number(u64::MAX, 0.9999).unwrap();
        assert_eq!(e, 1.0 / (1.0 - 0.9999));
        assert!((e - 10_000.0).abs() < 1e-8);
        // Values frozen from the geometric series.
        let e4 = effective_number(10_000, 0.9999).unwrap();
        assert!((e4 - series(10_000, 0.9999)).abs() / e4 < 1e-9);
        assert!((e4 - 6321.3895).abs() < 1e-3, "{e4}");
        // 1e4 * exp(-100) is far below one ulp of 1e4, so the ceiling is hit exactly.
        let e6 = effective_number(1_000_000, 0.9999).unwrap();
        assert!(
            e6 <= 1.0 / (1.0 - 0.9999) && (10_000.0 - e6).abs() / 10_000.0 < 1e-3,
            "{e6}"
        );
    }

    #[test]
    fn weight_examples() {
        assert_eq!(cb_weight(1, 0.9999).unwrap(), 1.0);
        let w2 = cb_weight(2, 0.9999).unwrap();
        assert!((w2 - 0.500025).abs() < 1e-6);
        assert!((w2 - 1.0 / series(2, 0.9999)).abs() < 1e-15);
        let ws: Vec<f64> = [1, 10, 100, 10_000]
            .iter()
            .map(|&n| cb_weight(n, 0.9999).unwrap())
            .collect();
        assert!(ws.windows(2).all(|w| w[0] > w[1]));
        assert!(cb_weight(0, 0.9).is_err());
        assert_eq!(class_weights(&[0, 1], 0.9).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn normalisation() {
        let counts = [100, 10, 0];
        let w = class_weights(&counts, 0.99).unwrap();
        let pm = normalize_weights(&w, &counts, WeightNorm::PointMean);
        let mass: f64 = pm.iter().zip(&counts).map(|(w, &c)| w * c as f64).sum();
        assert!((mass - 110.0).abs() < 1e-9);
        let cs = normalize_weights(&w, &counts, WeightNorm::ClassSum);
        assert!((cs.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(cs[2], 0.0);
        assert_eq!(normalize_weights(&w, &counts, WeightNorm::None), w);
    }

    #[test]
    fn modulator_examples() {
        assert_eq!(density_modulator(1.0).unwrap(), 1.0);
        assert!((density_modulator(std::f64::consts::E).unwrap() - 0.5).abs() < 1e-15);
        assert!((density_modulator(3f64.exp()).unwrap() - 0.25).abs() < 1e-15);
        assert!(density_modulator(0.5).is_err());
    }

    fn cloud(points: Vec<Point>, labels: Vec<u16>, c: usize) -> LabeledPointCloud {
        LabeledPointCloud::new(points, labels, c).unwrap()
    }

    #[test]
    fn densities() {
        let c = cloud(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![0; 3],
            1,
        );
        let idx = SpatialIndex::build(&c).unwrap();
        assert_eq!(local_density(&idx, 1, 1.0).unwrap(), 3);
        assert_eq!(local_density(&idx, 0, 0.5).unwrap(), 1);
        assert_eq!(local_density(&idx, 0, 10.0).unwrap(), 3);

        let sparse = cloud(
            (0..5).map(|i| [i as f32 * 10.0, 0.0, 0.0]).collect(),
            vec![0; 5],
            1,
        );
        let idx = SpatialIndex::build(&sparse).unwrap();
        assert_eq!(
            class_mean_density(&sparse, &idx, 1.0, Exec::Parallel).unwrap(),
            vec![Some(1.0)]
        );

        // Class 0: tight cluster; class 1: spread out; class 2 absent.
        let mut pts: Vec<Point> = (0..10).map(|i| [i as f32 * 0.01, 0.0, 0.0]).collect();
        pts.extend((0..10).map(|i| [5.0 + i as f32, 0.0, 0.0]));
        let labels = [vec![0; 10], vec![1; 10]].concat();
        let c = cloud(pts, labels, 3);
        let idx = SpatialIndex::build(&c).unwrap();
        let d = class_mean_density(&c, &idx, 0.2, Exec::Sequential).unwrap();
        assert_eq!(d[0], Some(10.0));
        assert_eq!(d[1], Some(1.0));
        assert_eq!(d[2], None);
    }

    #[test]
    fn partition_examples() {
        let counts = [40, 37, 20, 2, 1];
        let p = partition_classes(&counts, 0.15, 0.03).unwrap();
        assert_eq!(p.head().iter().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(p.common().is_empty());
        assert_eq!(p.tail().iter().copied().collect::<Vec<_>>(), vec![3, 4]);

        let p = partition_classes(&[25, 25, 25, 25], 0.15, 0.03).unwrap();
        assert_eq!(p.head().len(), 4);

        assert!(partition_classes(&counts, 0.03, 0.15).is_err());

        let mut groups = vec![Group::Head; 3];
        groups.extend([Group::Common; 2]);
        groups.extend([Group::Tail; 7]);
        let p = apply_partition_rule(&[1; 12], &PartitionRule::Explicit(groups)).unwrap();
        assert_eq!(
            (p.head().len(), p.common().len(), p.tail().len()),
            (3, 2, 7)
        );
    }

    #[test]
    fn report_has_one_row_per_class() {
        let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0, 0], 2);
        let idx = SpatialIndex::build(&c).unwrap();
        let s = ClassStats::compute(
            &c,
            &idx,
            0.9,
            0.5,
            &PartitionRule::default(),
            Exec::Parallel,
        )
        .unwrap();
        let report = s.report();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,0,0,0,NA,NA,tail"));
    }
}
