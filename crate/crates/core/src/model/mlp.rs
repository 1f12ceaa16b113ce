//! A small fully connected classifier with rectifier hidden layers and a
//! softmax head, plus its versioned binary file format (`TLGM`).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::features::FeatureConfig;
use crate::error::{Error, Result};
use crate::loss::softmax;
use crate::par::{self, Exec};

pub const MODEL_MAGIC: &[u8; 4] = b"TLGM";
pub const MODEL_VERSION: u32 = 1;

/// Rows per forward chunk. Parallel and sequential forward passes use the same
/// chunking so they produce identical bits.
const FORWARD_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    sizes: Vec<usize>,
    params: Vec<f64>,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    features: FeatureConfig,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    rows: usize,
    /// `layers[0]` is the standardised input; `layers[l]` the post-rectifier
    /// output of hidden layer `l`.
    layers: Vec<Vec<f64>>,
    logits: Vec<f64>,
    classes: usize,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.chunks(self.classes).flat_map(softmax).collect()
    }

    /// Arg-max class per row (lowest id on ties).
    pub fn predictions(&self) -> Vec<u16> {
        self.logits
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// `c = a (m x k) * b (k x n)`, all row-major, overwriting `c`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths match the dimensions and strides given.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a^T * b` for row-major `a (r x m)` and `b (r x n)`.
fn gemm_at_b(r: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            r,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a * b^T` for row-major `a (m x k)` and `b (n x k)`.
fn gemm_a_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Classifier {
    /// Weights drawn from `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, biases zero.
    pub fn new<R: Rng>(sizes: &[usize], features: FeatureConfig, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            params.extend((0..w[0] * w[1]).map(|_| dist.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Classifier {
            sizes: sizes.to_vec(),
            params,
            input_mean: vec![0.0; sizes[0]],
            input_scale: vec![1.0; sizes[0]],
            features,
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>, features: FeatureConfig) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != param_count(sizes) {
            return Err(Error::domain(format!(
                "{} parameters for layer sizes {sizes:?}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::domain("non-finite parameter"));
        }
        Ok(Classifier {
            sizes: sizes.to_vec(),
            params,
            input_mean: vec![0.0; sizes[0]],
            input_scale: vec![1.0; sizes[0]],
            features,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn feature_config(&self) -> FeatureConfig {
        self.features
    }

    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (&self.input_mean, &self.input_scale)
    }

    /// Sets `x' = (x - mean) * scale` as the input transform.
    pub fn set_standardization(&mut self, mean: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        if mean.len() != self.input_dim() || scale.len() != self.input_dim() {
            return Err(Error::domain(
                "standardisation length must match input dimension",
            ));
        }
        if mean.iter().chain(&scale).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite standardisation"));
        }
        self.input_mean = mean;
        self.input_scale = scale;
        Ok(())
    }

    /// Mean and inverse standard deviation per column of a row-major matrix.
    pub fn fit_standardization(&mut self, inputs: &[f64]) -> Result<()> {
        let f = self.input_dim();
        let n = inputs.len() / f;
        if n == 0 {
            return Ok(());
        }
        let mut mean = vec![0.0; f];
        for row in inputs.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for row in inputs.chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        self.set_standardization(mean, scale)
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let mut offset = 0;
        for w in self.sizes.windows(2).take(l) {
            offset += w[0] * w[1] + w[1];
        }
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[offset..offset + fan_in * fan_out];
        let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        (w, b)
    }

    fn check_inputs(&self, inputs: &[f64]) -> Result<usize> {
        let f = self.input_dim();
        if !inputs.len().is_multiple_of(f) {
            return Err(Error::domain(format!(
                "input length {} is not a multiple of the feature dimension {f}",
                inputs.len()
            )));
        }
        Ok(inputs.len() / f)
    }

    fn forward_rows(&self, inputs: &[f64]) -> ForwardCache {
        let f = self.input_dim();
        let rows = inputs.len() / f;
        let mut x: Vec<f64> = inputs.to_vec();
        for row in x.chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.input_mean).zip(&self.input_scale) {
                *v = (*v - m) * s;
            }
        }
        let depth = self.sizes.len() - 1;
        let mut layers = vec![x];
        let mut logits = Vec::new();
        for l in 0..depth {
            let (w, b) = self.layer(l);
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = vec![0.0; rows * fan_out];
            gemm(rows, fan_in, fan_out, layers.last().unwrap(), w, &mut z);
            for row in z.chunks_mut(fan_out) {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if l + 1 < depth {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                layers.push(z);
            } else {
                logits = z;
            }
        }
        ForwardCache {
            rows,
            layers,
            logits,
            classes: self.classes(),
        }
    }

    /// Logits for a row-major batch of raw feature vectors.
    pub fn forward(&self, inputs: &[f64], exec: Exec) -> Result<ForwardCache> {
        let rows = self.check_inputs(inputs)?;
        let f = self.input_dim();
        if rows <= FORWARD_CHUNK {
            return Ok(self.forward_rows(inputs));
        }
        let chunks: Vec<&[f64]> = inputs.chunks(FORWARD_CHUNK * f).collect();
        let parts = par::map_slice(exec, &chunks, |c| self.forward_rows(c));
        let mut merged = ForwardCache {
            rows,
            layers: vec![Vec::new(); self.sizes.len() - 1],
            logits: Vec::with_capacity(rows * self.classes()),
            classes: self.classes(),
        };
        for part in parts {
            for (dst, src) in merged.layers.iter_mut().zip(part.layers) {
                dst.extend(src);
            }
            merged.logits.extend(part.logits);
        }
        Ok(merged)
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the logits of `cache`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Vec<f64>> {
        let rows = cache.rows;
        if grad_logits.len() != rows * self.classes() {
            return Err(Error::domain(format!(
                "{} logit gradients for {rows} rows of {} classes",
                grad_logits.len(),
                self.classes()
            )));
        }
        let depth = self.sizes.len() - 1;
        let mut grads = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(depth);
        let mut o = 0;
        for w in self.sizes.windows(2) {
            offsets.push(o);
            o += w[0] * w[1] + w[1];
        }
        let mut dz = grad_logits.to_vec();
        for l in (0..depth).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &cache.layers[l];
            let off = offsets[l];
            let (gw, rest) = grads[off..].split_at_mut(fan_in * fan_out);
            gemm_at_b(rows, fan_in, fan_out, input, &dz, gw);
            let gb = &mut rest[..fan_out];
            for row in dz.chunks(fan_out) {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut da = vec![0.0; rows * fan_in];
                gemm_a_bt(rows, fan_out, fan_in, &dz, w, &mut da);
                for (d, a) in da.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz = da;
            }
        }
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.features.k_feat as u32).to_le_bytes());
        buf.extend_from_slice(&(self.features.k_context as u32).to_le_bytes());
        buf.extend_from_slice(&(self.features.coarse_stride as u32).to_le_bytes());
        buf.extend_from_slice(&self.features.density_radius.to_le_bytes());
        for v in self.input_mean.iter().chain(&self.input_scale) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::parse_offset(0, "bad magic, expected TLGM"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::parse_offset(
                4,
                format!("unsupported model version {version}"),
            ));
        }
        let depth = r.u32()? as usize;
        if !(2..=64).contains(&depth) {
            return Err(Error::parse_offset(
                8,
                format!("implausible layer count {depth}"),
            ));
        }
        let sizes = (0..depth)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let features = FeatureConfig {
            k_feat: r.u32()? as usize,
            k_context: r.u32()? as usize,
            coarse_stride: r.u32()? as usize,
            density_radius: r.f64()?,
        };
        let f = *sizes.first().unwrap();
        let mean = (0..f).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let scale = (0..f).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let count = r.u64()? as usize;
        if count != param_count(&sizes) {
            return Err(Error::parse_offset(
                r.pos,
                "parameter count does not match layer sizes",
            ));
        }
        let params = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::parse_offset(
                r.pos,
                "trailing bytes after parameters",
            ));
        }
        let mut model = Classifier::from_params(&sizes, params, features)?;
        model.set_standardization(mean, scale)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Classifier::from_bytes(&bytes)
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse_offset(
                self.pos,
                "unexpected end of model file",
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{evaluate, LogitBatch, LossConfig, LossFamily, LossInputs};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(n: usize, f: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * f).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities() {
        let sizes = [3, 5, 4];
        let m = Classifier::from_params(
            &sizes,
            vec![0.0; param_count(&sizes)],
            FeatureConfig::default(),
        )
        .unwrap();
        let out = m.forward(&random_inputs(7, 3, 1), Exec::Parallel).unwrap();
        assert!(out
            .probabilities()
            .iter()
            .all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_bias_saturates() {
        let sizes = [2, 3];
        let mut params = vec![0.0; param_count(&sizes)];
        params[6 + 1] = 50.0;
        let m = Classifier::from_params(&sizes, params, FeatureConfig::default()).unwrap();
        let p = m
            .forward(&[0.3, -0.2], Exec::Parallel)
            .unwrap()
            .probabilities();
        assert!(p[1] > 1.0 - 1e-12);
        assert_eq!(
            m.forward(&[0.3, -0.2], Exec::Parallel)
                .unwrap()
                .predictions(),
            vec![1]
        );
    }

    #[test]
    fn probabilities_normalised_and_chunking_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Classifier::new(&[8, 16, 16, 12], FeatureConfig::default(), &mut rng).unwrap();
        let x = random_inputs(10_000, 8, 3);
        let par = m.forward(&x, Exec::Parallel).unwrap();
        let seq = m.forward(&x, Exec::Sequential).unwrap();
        assert_eq!(par.logits(), seq.logits());
        for row in par.probabilities().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(m.forward(&x[..7], Exec::Parallel).is_err());
    }

    fn objective(m: &Classifier, x: &[f64], y: &[u16]) -> (f64, Vec<f64>) {
        let cache = m.forward(x, Exec::Sequential).unwrap();
        let out = evaluate(
            &LossConfig::new(LossFamily::Ce),
            LogitBatch::new(cache.logits(), m.classes()).unwrap(),
            y,
            LossInputs::default(),
            Exec::Sequential,
        )
        .unwrap();
        let g = m.backward(&cache, &out.grad).unwrap();
        (out.loss, g)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Classifier::new(&[4, 6, 5, 3], FeatureConfig::default(), &mut rng).unwrap();
        let x = random_inputs(3, 4, 5);
        let y = [0u16, 2, 1];
        let (_, g) = objective(&m, &x, &y);
        let h = 1e-5;
        for p in 0..m.params().len() {
            let mut plus = m.clone();
            plus.params_mut()[p] += h;
            let mut minus = m.clone();
            minus.params_mut()[p] -= h;
            let fd = (objective(&plus, &x, &y).0 - objective(&minus, &x, &y).0) / (2.0 * h);
            let err = (fd - g[p]).abs();
            assert!(
                err <= 1e-4 * fd.abs().max(g[p].abs()).max(1e-6),
                "param {p}: {fd} vs {}",
                g[p]
            );
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Classifier::new(&[3, 4, 2], FeatureConfig::default(), &mut rng).unwrap();
        let cache = m.forward(&random_inputs(5, 3, 7), Exec::Parallel).unwrap();
        let g = m.backward(&cache, &[0.0; 10]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(m.backward(&cache, &[0.0; 9]).is_err());
    }

    #[test]
    fn duplicated_point_doubles_its_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Classifier::new(&[3, 4, 2], FeatureConfig::default(), &mut rng).unwrap();
        let x = random_inputs(1, 3, 9);
        let up = [0.3, -0.3];
        let single = m
            .backward(&m.forward(&x, Exec::Parallel).unwrap(), &up)
            .unwrap();
        let xx = [x.clone(), x].concat();
        let double = m
            .backward(&m.forward(&xx, Exec::Parallel).unwrap(), &[up, up].concat())
            .unwrap();
        for (a, b) in single.iter().zip(&double) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn model_file_roundtrip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = Classifier::new(&[26, 4, 3], FeatureConfig::default(), &mut rng).unwrap();
        m.fit_standardization(&random_inputs(20, 26, 11)).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"TLGM");
        assert_eq!(Classifier::from_bytes(&bytes).unwrap(), m);
        assert!(Classifier::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Classifier::from_bytes(&bad).is_err());
        assert!(Classifier::new(&[3], FeatureConfig::default(), &mut rng).is_err());
    }
}
