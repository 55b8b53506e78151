//! Orthogonally constrained, reliability-weighted fusion.
//!
//! Both modalities are projected from `C` into a shared `2C` channel space
//! through the two column halves of one orthogonal `2C × 2C` matrix `Q`:
//!
//! ```text
//! W_R = Q[:, ..C] / √C        W_S = Q[:, C..] / √C
//! W_Rᵀ W_S = 0                ‖W_R‖_F = ‖W_S‖_F = 1
//! ```
//!
//! Two full-rank `C × C` maps cannot be cross-orthogonal in a `C`-dimensional
//! space, which is why the output space is lifted to `2C`. Per-channel fusion
//! weights come from a two-way softmax over reliability vectors produced by a
//! small MLP from each modality's pooled reliability.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dmqa::{FeatureMap, ReliabilityResult};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::numerics::{
    matmul_nt, matmul_tn, matmul_unchecked, read_tensor, sym_eig, write_tensor, Matrix,
    TensorHeader,
};

/// Gram-matrix tolerance accepted when wrapping an existing joint matrix.
const ORTHO_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProjectorRepr", into = "ProjectorRepr")]
pub struct OrthoProjector {
    joint: Matrix,
    w_r: Matrix,
    w_s: Matrix,
    channels_in: usize,
}

#[derive(Serialize, Deserialize)]
struct ProjectorRepr {
    joint: Matrix,
}

impl TryFrom<ProjectorRepr> for OrthoProjector {
    type Error = Error;

    fn try_from(repr: ProjectorRepr) -> Result<Self> {
        OrthoProjector::from_joint(repr.joint)
    }
}

impl From<OrthoProjector> for ProjectorRepr {
    fn from(p: OrthoProjector) -> Self {
        ProjectorRepr { joint: p.joint }
    }
}

/// `‖QᵀQ − I‖_F`.
pub fn orthogonality_error(q: &Matrix) -> f64 {
    let mut g = matmul_tn(q, q);
    for i in 0..g.rows() {
        g[(i, i)] -= 1.0;
    }
    g.frobenius_norm()
}

impl OrthoProjector {
    /// Wraps an orthogonal `2C × 2C` matrix.
    pub fn from_joint(joint: Matrix) -> Result<Self> {
        let n = joint.rows();
        if joint.cols() != n || n == 0 || n % 2 != 0 {
            return Err(Error::contract(
                "OrthoProjector",
                format!("joint matrix must be square with even order, got {}x{}", n, joint.cols()),
            ));
        }
        let err = orthogonality_error(&joint);
        if !(err <= ORTHO_TOLERANCE) {
            return Err(Error::contract(
                "OrthoProjector",
                format!("joint matrix is not orthogonal (‖QᵀQ − I‖ = {err:e})"),
            ));
        }
        Ok(Self::derive(joint))
    }

    fn derive(joint: Matrix) -> Self {
        let n = joint.rows();
        let c = n / 2;
        let s = 1.0 / (c as f64).sqrt();
        let w_r = joint.columns(0, c).scale(s);
        let w_s = joint.columns(c, n).scale(s);
        Self {
            joint,
            w_r,
            w_s,
            channels_in: c,
        }
    }

    /// Shifts one entry of `Q` and re-derives the halves without checking
    /// orthogonality. Only meant for finite-difference probes.
    pub(crate) fn shifted_unchecked(&self, idx: usize, delta: f64) -> Self {
        let mut joint = self.joint.clone();
        joint.data_mut()[idx] += delta;
        Self::derive(joint)
    }

    pub fn joint(&self) -> &Matrix {
        &self.joint
    }

    /// Optical projection, `2C × C`.
    pub fn w_r(&self) -> &Matrix {
        &self.w_r
    }

    /// SAR projection, `2C × C`.
    pub fn w_s(&self) -> &Matrix {
        &self.w_s
    }

    pub fn channels_in(&self) -> usize {
        self.channels_in
    }

    pub fn channels_out(&self) -> usize {
        2 * self.channels_in
    }

    /// `‖W_Rᵀ W_S‖_F`.
    pub fn cross_talk(&self) -> f64 {
        matmul_tn(&self.w_r, &self.w_s).frobenius_norm()
    }

    /// Largest deviation of `‖W_R‖_F` or `‖W_S‖_F` from one.
    pub fn norm_error(&self) -> f64 {
        (self.w_r.frobenius_norm() - 1.0)
            .abs()
            .max((self.w_s.frobenius_norm() - 1.0).abs())
    }

    pub fn write(&self, base: &Path) -> Result<()> {
        let n = self.joint.rows();
        let header = TensorHeader::new(&[n, n]).with("channels_in", self.channels_in);
        write_tensor(base, &header, self.joint.data())
    }

    pub fn read(base: &Path) -> Result<Self> {
        let (header, data) = read_tensor(base)?;
        if header.shape.len() != 2 {
            return Err(Error::contract("OrthoProjector::read", "expected a 2-D tensor"));
        }
        let proj = Self::from_joint(Matrix::new(header.shape[0], header.shape[1], data)?)?;
        if let Some(c) = header.extra.get("channels_in").and_then(|v| v.as_u64()) {
            if c as usize != proj.channels_in {
                return Err(Error::contract(
                    "OrthoProjector::read",
                    format!("sidecar says C = {c}, matrix implies {}", proj.channels_in),
                ));
            }
        }
        Ok(proj)
    }
}

/// Orthogonalizes `raw` by whitening: `Q = raw · (rawᵀ raw)^(−1/2)`.
pub fn init_projector(raw: &Matrix) -> Result<OrthoProjector> {
    let n = raw.rows();
    if raw.cols() != n || n == 0 || n % 2 != 0 {
        return Err(Error::contract(
            "init_projector",
            format!("expected a square matrix of even order, got {}x{}", n, raw.cols()),
        ));
    }
    let cov = matmul_tn(raw, raw);
    let (values, vectors) = sym_eig(&cov)?;
    let smallest = *values.last().expect("non-empty spectrum");
    if !(smallest >= 1e-10) {
        return Err(Error::degenerate(
            "init_projector",
            format!("covariance eigenvalue {smallest:e} is below 1e-10"),
        ));
    }
    // V diag(λ^(−1/2)) Vᵀ
    let scaled = Matrix::from_fn(n, n, |i, j| vectors[(i, j)] / values[j].sqrt());
    let inv_sqrt = matmul_nt(&scaled, &vectors);
    let q = matmul_unchecked(raw, &inv_sqrt);
    OrthoProjector::from_joint(q)
}

/// Maps a pooled reliability scalar to a channel-wise reliability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub mlp: Mlp,
}

impl FusionParams {
    /// Random weights with all signs positive, so that at initialization
    /// every channel's reliability increases with the input score.
    pub fn new<R: Rng + ?Sized>(channels_out: usize, hidden: usize, rng: &mut R) -> Self {
        let mut mlp = Mlp::init(1, hidden, channels_out, 1.0, rng);
        for v in mlp.w1.data_mut().iter_mut().chain(mlp.w2.data_mut()) {
            *v = v.abs();
        }
        Self { mlp }
    }

    pub fn channels_out(&self) -> usize {
        self.mlp.output_dim()
    }
}

/// Channel reliability vector for a single pooled score.
pub fn channel_reliability_from_pooled(pooled: f64, params: &FusionParams) -> Vec<f64> {
    let x = Matrix::new(1, 1, vec![pooled]).expect("1x1");
    params.mlp.forward(&x).into_data()
}

/// Mean-pools each sample's combined reliability and maps it through the MLP.
pub fn channel_reliability(r: &ReliabilityResult, params: &FusionParams) -> Vec<Vec<f64>> {
    r.pooled()
        .into_iter()
        .map(|p| channel_reliability_from_pooled(p, params))
        .collect()
}

/// Per-channel two-way softmax, returning `(γ_R, γ_S)`.
pub fn fusion_weights(r_tilde_r: &[f64], r_tilde_s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if r_tilde_r.len() != r_tilde_s.len() {
        return Err(Error::contract(
            "fusion_weights",
            format!("{} vs {} channels", r_tilde_r.len(), r_tilde_s.len()),
        ));
    }
    let mut gamma_r = Vec::with_capacity(r_tilde_r.len());
    let mut gamma_s = Vec::with_capacity(r_tilde_r.len());
    for (&a, &b) in r_tilde_r.iter().zip(r_tilde_s) {
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        gamma_r.push(ea / (ea + eb));
        gamma_s.push(eb / (ea + eb));
    }
    Ok((gamma_r, gamma_s))
}

/// `F(i) ↦ W·F(i)` for every position: `(N × C) → (N × 2C)`.
pub fn project(f: &Matrix, w: &Matrix) -> Matrix {
    matmul_nt(f, w)
}

/// Fuses projected features with per-sample channel weights, using arbitrary
/// projections (shared by the baseline variants).
pub fn fuse_projected(
    f_r: &FeatureMap,
    f_s: &FeatureMap,
    w_r: &Matrix,
    w_s: &Matrix,
    gamma_r: &[Vec<f64>],
    gamma_s: &[Vec<f64>],
) -> Result<FeatureMap> {
    if f_r.shape() != f_s.shape() {
        return Err(Error::contract(
            "ocnf_fuse",
            format!("optical {:?} vs SAR {:?}", f_r.shape(), f_s.shape()),
        ));
    }
    let [b, n, c] = f_r.shape();
    if w_r.cols() != c || w_s.cols() != c || w_r.rows() != w_s.rows() {
        return Err(Error::contract(
            "ocnf_fuse",
            format!("projections do not accept {c} channels"),
        ));
    }
    let out = w_r.rows();
    if gamma_r.len() != b
        || gamma_s.len() != b
        || gamma_r.iter().chain(gamma_s).any(|g| g.len() != out)
    {
        return Err(Error::contract(
            "ocnf_fuse",
            format!("expected {b} fusion-weight vectors of length {out}"),
        ));
    }
    let mut slices = Vec::with_capacity(b);
    for s in 0..b {
        let pr = project(&f_r.sample(s), w_r);
        let ps = project(&f_s.sample(s), w_s);
        let fused = Matrix::from_fn(n, out, |i, ch| {
            gamma_r[s][ch] * pr[(i, ch)] + gamma_s[s][ch] * ps[(i, ch)]
        });
        slices.push(fused);
    }
    if b == 0 {
        return Ok(FeatureMap::zeros(0, n, out));
    }
    FeatureMap::from_samples(&slices)
}

/// `γ_R ⊙ W_R F_R + γ_S ⊙ W_S F_S`, weights broadcast over positions.
pub fn ocnf_fuse(
    f_r: &FeatureMap,
    f_s: &FeatureMap,
    proj: &OrthoProjector,
    gamma_r: &[Vec<f64>],
    gamma_s: &[Vec<f64>],
) -> Result<FeatureMap> {
    fuse_projected(f_r, f_s, proj.w_r(), proj.w_s(), gamma_r, gamma_s)
}
