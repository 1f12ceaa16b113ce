//! Handcrafted per-point descriptors from local covariance eigenvalues.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::pointcloud::{FeatureMatrix, LabeledPointCloud};
use crate::spatial::SpatialIndex;

/// Descriptors per neighbourhood scale.
pub const SCALE_DIM: usize = 8;
pub const SCALES: [&str; 3] = ["fine", "context", "coarse"];
pub const FEATURE_DIM: usize = 2 + SCALE_DIM * SCALES.len();

const SCALE_FEATURES: [&str; SCALE_DIM] = [
    "linearity",
    "planarity",
    "sphericity",
    "verticality",
    "axis_verticality",
    "reach",
    "axis_offset",
    "axis_offset_ratio",
];

/// Column names: `height`, `log_density`, then `<scale>_<descriptor>` for
/// each scale in [`SCALES`].
pub fn feature_names() -> Vec<String> {
    let mut names = vec!["height".to_string(), "log_density".to_string()];
    for scale in SCALES {
        names.extend(SCALE_FEATURES.iter().map(|f| format!("{scale}_{f}")));
    }
    names
}

/// Settings of the feature pipeline; stored alongside trained models so the
/// same pipeline is replayed at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureConfig {
    pub k_feat: usize,
    /// Neighbours of the context scale, also used at the coarse scale.
    pub k_context: usize,
    /// The coarse scale searches among every `coarse_stride`-th point only,
    /// which widens its neighbourhood by about `sqrt(coarse_stride)`.
    pub coarse_stride: usize,
    pub density_radius: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            k_feat: 16,
            k_context: 64,
            coarse_stride: 8,
            density_radius: 0.2,
        }
    }
}

/// Eigen-features of one neighbourhood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenFeatures {
    pub linearity: f64,
    pub planarity: f64,
    pub sphericity: f64,
    /// `|z|` of the normal (least-variance) direction.
    pub verticality: f64,
    /// `|z|` of the principal direction.
    pub axis_verticality: f64,
}

impl EigenFeatures {
    /// Convention for neighbourhoods with no spread at all.
    pub const DEGENERATE: EigenFeatures = EigenFeatures {
        linearity: 0.0,
        planarity: 0.0,
        sphericity: 1.0,
        verticality: 0.0,
        axis_verticality: 0.0,
    };

    pub fn shape(&self) -> [f64; 3] {
        [self.linearity, self.planarity, self.sphericity]
    }

    /// L2 distance between the (linearity, planarity, sphericity) triples.
    pub fn distance(&self, other: &EigenFeatures) -> f64 {
        let a = self.shape();
        let b = other.shape();
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

pub fn eigen_features(points: &[[f64; 3]]) -> EigenFeatures {
    principal_frame(points).0
}

/// Eigen-features together with the centroid and principal direction.
fn principal_frame(points: &[[f64; 3]]) -> (EigenFeatures, Vector3<f64>, Vector3<f64>) {
    if points.len() < 2 {
        let c = points
            .first()
            .map_or(Vector3::zeros(), |p| Vector3::new(p[0], p[1], p[2]));
        return (EigenFeatures::DEGENERATE, c, Vector3::z());
    }
    let n = points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in points {
        mean += Vector3::new(p[0], p[1], p[2]);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p[0], p[1], p[2]) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = eig.eigenvalues[order[1]].max(0.0);
    let l3 = eig.eigenvalues[order[2]].max(0.0);
    // Spread below float noise relative to the coordinates counts as coincident.
    let scale = mean.norm().max(1.0);
    let axis: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    if l1 <= (scale * 1e-12).powi(2) {
        return (EigenFeatures::DEGENERATE, mean, axis);
    }
    let features = EigenFeatures {
        linearity: ((l1 - l2) / l1).clamp(0.0, 1.0),
        planarity: ((l2 - l3) / l1).clamp(0.0, 1.0),
        sphericity: (l3 / l1).clamp(0.0, 1.0),
        verticality: eig.eigenvectors.column(order[2])[2].abs(),
        axis_verticality: axis[2].abs(),
    };
    (features, mean, axis)
}

/// Distance of `p` from the line through `centre` along unit `axis`.
fn axis_distance(p: &[f64; 3], centre: &Vector3<f64>, axis: &Vector3<f64>) -> f64 {
    let d = Vector3::new(p[0], p[1], p[2]) - centre;
    (d - axis * d.dot(axis)).norm()
}

/// Features of every point, in point order.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatures {
    pub rows: Vec<[f64; FEATURE_DIM]>,
    pub config: FeatureConfig,
}

impl PointFeatures {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_matrix(&self) -> FeatureMatrix {
        FeatureMatrix::new(
            FEATURE_DIM,
            self.rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .expect("features are finite")
    }
}

fn scale_block(p: &[f64; 3], nbh: &[[f64; 3]]) -> [f64; SCALE_DIM] {
    let (eig, centre, axis) = principal_frame(nbh);
    let offset = axis_distance(p, &centre, &axis);
    let mean_offset = nbh
        .iter()
        .map(|q| axis_distance(q, &centre, &axis))
        .sum::<f64>()
        / nbh.len() as f64;
    let ratio = if mean_offset > 1e-12 {
        offset / mean_offset
    } else {
        1.0
    };
    let reach = nbh
        .iter()
        .map(|q| crate::spatial::dist2(p, q))
        .fold(0.0, f64::max)
        .sqrt();
    [
        eig.linearity,
        eig.planarity,
        eig.sphericity,
        eig.verticality,
        eig.axis_verticality,
        reach,
        offset,
        ratio,
    ]
}

/// Computes the descriptor set for every point of `cloud`.
///
/// Height is measured from the lowest point of the cloud; density is the
/// self-inclusive radius count at `density_radius`, log-scaled. At each scale
/// the axis offset is the distance of the point from the principal axis of
/// its neighbourhood, which approximates the local radius on tubular parts;
/// the ratio compares it with the neighbourhood average.
pub fn extract_features(
    cloud: &LabeledPointCloud,
    index: &SpatialIndex,
    config: FeatureConfig,
    exec: Exec,
) -> Result<PointFeatures> {
    if config.k_feat < 4 {
        return Err(Error::domain(format!(
            "feature neighbourhood needs k >= 4, got {}",
            config.k_feat
        )));
    }
    if config.k_context < config.k_feat {
        return Err(Error::domain(
            "context neighbourhood must not be smaller than k_feat",
        ));
    }
    if config.coarse_stride == 0 {
        return Err(Error::domain("coarse stride must be at least 1"));
    }
    if !(config.density_radius > 0.0) {
        return Err(Error::domain("density radius must be positive"));
    }
    if index.len() != cloud.len() {
        return Err(Error::domain("index was built over a different cloud"));
    }
    let k = config.k_feat.min(cloud.len());
    let kc = config.k_context.min(cloud.len());
    let coarse_ids: Vec<usize> = (0..cloud.len()).step_by(config.coarse_stride).collect();
    let coarse_positions: Vec<_> = coarse_ids.iter().map(|&i| cloud.positions()[i]).collect();
    let coarse = SpatialIndex::from_positions(&coarse_positions)?;
    let kk = config.k_context.min(coarse.len());
    let ground = index.bounding_box().min[2];
    let rows = par::map_indices(exec, cloud.len(), |i| {
        let p = index.point(i);
        let nbh: Vec<[f64; 3]> = index
            .knn(i, kc)
            .expect("k within cloud size")
            .iter()
            .map(|&j| index.point(j))
            .collect();
        let far: Vec<[f64; 3]> = coarse
            .knn_point(&p, kk)
            .expect("k within subsample size")
            .iter()
            .map(|&j| coarse.point(j))
            .collect();
        let density = index
            .radius_count(i, config.density_radius)
            .expect("validated radius");
        let mut row = [0.0; FEATURE_DIM];
        row[0] = p[2] - ground;
        row[1] = (density as f64).ln();
        row[2..2 + SCALE_DIM].copy_from_slice(&scale_block(&p, &nbh[..k]));
        row[2 + SCALE_DIM..2 + 2 * SCALE_DIM].copy_from_slice(&scale_block(&p, &nbh));
        row[2 + 2 * SCALE_DIM..].copy_from_slice(&scale_block(&p, &far));
        row
    });
    Ok(PointFeatures { rows, config })
}
