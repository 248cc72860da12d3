//! Linear projection head over sparse hashed features, trained with AdamW.
//!
//! File layout (`BELXHEAD`, little-endian): magic, u32 input dimension F,
//! u32 output dimension d, F×d f32 weights row-major, d f32 bias.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::SparseFeatures;
use crate::error::{BelxError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"BELXHEAD";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState<T> {
    m_w: Vec<T>,
    v_w: Vec<T>,
    m_b: Vec<T>,
    v_b: Vec<T>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    fn new(f: usize, d: usize) -> Self {
        Self {
            m_w: vec![T::zero(); f * d],
            v_w: vec![T::zero(); f * d],
            m_b: vec![T::zero(); d],
            v_b: vec![T::zero(); d],
            step: 0,
        }
    }
}

/// Gradient of a loss with respect to the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    weights: Matrix<T>,
    bias: Vec<T>,
    state: AdamState<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    /// Weights uniform in ±√(6/(F+d)), zero bias.
    pub fn init(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (input_dim + output_dim) as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| T::of(rng.random_range(-a..a)))
            .collect();
        Self::from_parts(
            Matrix::from_vec(input_dim, output_dim, data).expect("sized"),
            vec![T::zero(); output_dim],
        )
        .expect("consistent shapes")
    }

    pub fn from_parts(weights: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(BelxError::DimensionMismatch {
                expected: weights.cols(),
                got: bias.len(),
            });
        }
        let state = AdamState::new(weights.rows(), weights.cols());
        Ok(Self { weights, bias, state })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .as_slice()
            .iter()
            .chain(&self.bias)
            .all(|v| v.is_finite())
    }

    /// `y = Wᵀx + b`.
    pub fn project(&self, x: &SparseFeatures) -> Vec<T> {
        let mut y = self.bias.clone();
        for &(b, v) in &x.entries {
            let row = self.weights.row(b as usize);
            let v = T::of(v as f64);
            for (yk, &w) in y.iter_mut().zip(row) {
                *yk += v * w;
            }
        }
        y
    }

    pub fn project_batch(&self, xs: &[SparseFeatures]) -> Matrix<T> {
        let mut out = Matrix::zeros(xs.len(), self.output_dim());
        for (i, x) in xs.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&self.project(x));
        }
        out
    }

    /// Pulls `∂L/∂y` (one row per input) back to the parameters.
    pub fn backward(&self, xs: &[SparseFeatures], grad_out: &Matrix<T>) -> HeadGradient<T> {
        let d = self.output_dim();
        let mut gw = Matrix::zeros(self.input_dim(), d);
        let mut gb = vec![T::zero(); d];
        for (i, x) in xs.iter().enumerate() {
            let go = grad_out.row(i);
            for (k, g) in gb.iter_mut().enumerate() {
                *g += go[k];
            }
            for &(b, v) in &x.entries {
                let v = T::of(v as f64);
                let row = gw.row_mut(b as usize);
                for (r, &g) in row.iter_mut().zip(go) {
                    *r += v * g;
                }
            }
        }
        HeadGradient {
            weights: gw,
            bias: gb,
        }
    }

    /// One AdamW step with decoupled weight decay:
    /// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
    pub fn apply(&mut self, grad: &HeadGradient<T>, cfg: &AdamWConfig) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let update = |theta: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for i in 0..theta.len() {
                let gi = g[i].to_f64_lossy();
                let mi = cfg.beta1 * m[i].to_f64_lossy() + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v[i].to_f64_lossy() + (1.0 - cfg.beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let th = theta[i].to_f64_lossy();
                let step = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                theta[i] = T::of(th - step - cfg.lr * cfg.weight_decay * th);
            }
        };
        let state = &mut self.state;
        update(
            self.weights.as_mut_slice(),
            grad.weights.as_slice(),
            &mut state.m_w,
            &mut state.v_w,
        );
        update(&mut self.bias, &grad.bias, &mut state.m_b, &mut state.v_b);
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionHead<U> {
        ProjectionHead::from_parts(
            self.weights.cast(),
            self.bias.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        )
        .expect("same shapes")
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let io = |source| BelxError::Io { rows: 0, source };
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(self.input_dim() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(self.output_dim() as u32).to_le_bytes())
            .map_err(io)?;
        let mut buf = Vec::with_capacity((self.weights.as_slice().len() + self.bias.len()) * 4);
        for v in self.weights.as_slice().iter().chain(&self.bias) {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let io = |source| BelxError::Io { rows: 0, source };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(BelxError::Format("not a BELXHEAD projection head file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let f = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(io)?;
        let d = u32::from_le_bytes(b4) as usize;
        let mut bytes = vec![0u8; (f * d + d) * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let vals: Vec<T> = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let (w, b) = vals.split_at(f * d);
        Self::from_parts(Matrix::from_vec(f, d, w.to_vec())?, b.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| BelxError::file(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| BelxError::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| BelxError::file(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }

    /// SHA-256 of the serialized parameters.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        format!("{:x}", Sha256::digest(&buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(entries: &[(u32, f32)]) -> SparseFeatures {
        SparseFeatures {
            entries: entries.to_vec(),
        }
    }

    #[test]
    fn projection_matches_dense_product() {
        let head = ProjectionHead::<f64>::init(6, 3, 1);
        let x = features(&[(1, 2.0), (4, -1.0)]);
        let y = head.project(&x);
        let dense = x.to_dense(6);
        for k in 0..3 {
            let mut acc = head.bias()[k];
            for (j, &xj) in dense.iter().enumerate() {
                acc += xj as f64 * head.weights().get(j, k);
            }
            assert!((y[k] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // L = Σ_i c_i · y_i for fixed c: ∂L/∂W[j,k] = Σ_i x_ij c_ik
        let head = ProjectionHead::<f64>::init(5, 2, 3);
        let xs = vec![features(&[(0, 1.0), (3, 2.0)]), features(&[(3, -1.0), (4, 1.0)])];
        let c = Matrix::from_rows(&[[0.5, -2.0], [1.5, 0.25]]).unwrap();
        let loss = |h: &ProjectionHead<f64>| -> f64 {
            let y = h.project_batch(&xs);
            (0..2)
                .flat_map(|i| (0..2).map(move |k| (i, k)))
                .map(|(i, k)| c.get(i, k) * y.get(i, k))
                .sum()
        };
        let g = head.backward(&xs, &c);
        for j in 0..5 {
            for k in 0..2 {
                let mut plus = head.clone();
                let mut minus = head.clone();
                let w = head.weights().get(j, k);
                plus.weights.set(j, k, w + 1e-6);
                minus.weights.set(j, k, w - 1e-6);
                let fd = (loss(&plus) - loss(&minus)) / 2e-6;
                assert!((fd - g.weights.get(j, k)).abs() < 1e-8);
            }
        }
        assert!((g.bias[0] - 2.0).abs() < 1e-12);
        assert!((g.bias[1] + 1.75).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step() {
        // first step: m̂ = g, v̂ = g², so the update is lr·sign(g) (up to eps)
        // plus decay lr·wd·θ
        let w = Matrix::from_rows(&[[1.0f64, -2.0]]).unwrap();
        let mut head = ProjectionHead::from_parts(w, vec![0.5, 0.0]).unwrap();
        let grad = HeadGradient {
            weights: Matrix::from_rows(&[[0.3, -4.0]]).unwrap(),
            bias: vec![0.0, 1e-3],
        };
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        head.apply(&grad, &cfg);
        let e = |g: f64| g / (g.abs() + 1e-8);
        assert!((head.weights().get(0, 0) - (1.0 - 0.1 * e(0.3) - 0.1 * 0.01 * 1.0)).abs() < 1e-12);
        assert!((head.weights().get(0, 1) - (-2.0 - 0.1 * e(-4.0) + 0.1 * 0.01 * 2.0)).abs() < 1e-12);
        assert!((head.bias()[0] - (0.5 - 0.1 * 0.01 * 0.5)).abs() < 1e-12);
        assert!((head.bias()[1] - (0.0 - 0.1 * e(1e-3))).abs() < 1e-12);
        assert_eq!(head.steps(), 1);
    }

    #[test]
    fn file_roundtrip_is_f32_exact() {
        let head = ProjectionHead::<f32>::init(7, 3, 9);
        let mut buf = Vec::new();
        head.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"BELXHEAD");
        assert_eq!(buf.len(), 8 + 4 + 4 + (21 + 3) * 4);
        let back = ProjectionHead::<f32>::read(buf.as_slice()).unwrap();
        assert_eq!(back.weights(), head.weights());
        assert_eq!(back.bias(), head.bias());
        assert_eq!(back.content_hash(), head.content_hash());
    }
}
