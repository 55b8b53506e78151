//! Reverse-mode gradients for the reliability + fusion pipeline, central
//! finite-difference verification, and constraint-preserving SGD.
//!
//! The operation graph is fixed for a given configuration, so the backward
//! pass is written by hand: the forward pass of every sample keeps the
//! intermediates produced by the `dmqa` and `ocnf` kernels, and `model`
//! walks them in reverse. Non-differentiable points (the arg-max in the
//! magnitude normalizer, the arg-max over tokens, the direction clamp) take
//! the subgradient of the selected branch.

mod check;
mod model;
mod optim;
mod reference;

pub use check::{
    boundary_free_case, boundary_free_case_for, check_suite, fd_check, fd_check_with, random_case, random_case_for,
    rel_err, CaseReport, CheckCase, CheckDims, GradReport, GroupReport, Stencil, SuiteReport,
};
pub use model::{
    pipeline_margin, predict, sample_outputs, Batch, Objective, ProbeCrossEntropy, SampleOutput,
};
pub use optim::{retract_projector, sgd_step};
pub use reference::reference_loss;

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dmqa::{logit, DmqaParams, TokenBank, DEFAULT_EPSILON, DEFAULT_ITERATIONS, DEFAULT_TOKENS};
use crate::error::{Error, Result};
use crate::missing::stream_rng;
use crate::mlp::Mlp;
use crate::numerics::Matrix;
use crate::ocnf::{init_projector, FusionParams, OrthoProjector};

/// Which fusion components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Mean of both modalities through a fixed shared lift.
    MeanBaseline,
    /// Shared fixed lift, fusion weights from reliability scores.
    DmqaOnly,
    /// Learned orthogonal projections with uniform reliabilities.
    OcnfOnly,
    /// Reliability-weighted fusion through the learned orthogonal projections.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::MeanBaseline,
        Variant::DmqaOnly,
        Variant::OcnfOnly,
        Variant::Full,
    ];

    pub fn uses_reliability(self) -> bool {
        matches!(self, Variant::DmqaOnly | Variant::Full)
    }

    pub fn uses_projector(self) -> bool {
        matches!(self, Variant::OcnfOnly | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::MeanBaseline => "mean_baseline",
            Variant::DmqaOnly => "dmqa_only",
            Variant::OcnfOnly => "ocnf_only",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Shapes and initial values of the learnable model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub tokens: usize,
    pub iterations: usize,
    pub num_classes: usize,
    pub epsilon: f64,
    pub alpha_init: f64,
    pub beta_init: f64,
    /// Hidden width of the token-update MLP.
    pub mlp_hidden: usize,
    /// Hidden width of the reliability-to-channel MLP.
    pub fusion_hidden: usize,
}

impl ModelConfig {
    pub fn new(channels: usize, num_classes: usize) -> Self {
        Self {
            channels,
            tokens: DEFAULT_TOKENS,
            iterations: DEFAULT_ITERATIONS,
            num_classes,
            epsilon: DEFAULT_EPSILON,
            alpha_init: 0.5,
            beta_init: 0.5,
            mlp_hidden: 2 * channels,
            fusion_hidden: channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("tokens", self.tokens),
            ("iterations", self.iterations),
            ("num_classes", self.num_classes),
            ("mlp_hidden", self.mlp_hidden),
            ("fusion_hidden", self.fusion_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        for (name, v) in [("alpha_init", self.alpha_init), ("beta_init", self.beta_init)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Linear classifier on pooled fused features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// `2C × classes`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Every learnable parameter of the pipeline plus the fixed baseline lift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tokens_r: TokenBank,
    pub tokens_s: TokenBank,
    pub dmqa: DmqaParams,
    pub fusion: FusionParams,
    pub projector: OrthoProjector,
    /// Fixed `2C × C` lift with orthogonal columns scaled to unit Frobenius
    /// norm, shared by both modalities in the non-orthogonal variants.
    pub lift: Matrix,
    pub probe: Probe,
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

impl ParamSet {
    /// Seeded initialization. Every component draws from its own stream, so
    /// adding a component never shifts the others.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let tokens_r = TokenBank::random(cfg.tokens, c, &mut stream_rng(seed, 1))?;
        let tokens_s = TokenBank::random(cfg.tokens, c, &mut stream_rng(seed, 2))?;
        let dmqa = DmqaParams {
            alpha_raw: logit(cfg.alpha_init),
            beta_raw: logit(cfg.beta_init),
            epsilon: cfg.epsilon,
            iterations: cfg.iterations,
            mlp: Mlp::init(c, cfg.mlp_hidden, c, 0.0, &mut stream_rng(seed, 3)),
        };
        let fusion = FusionParams::new(2 * c, cfg.fusion_hidden, &mut stream_rng(seed, 4));
        let projector = init_projector(&gaussian_matrix(2 * c, 2 * c, 1.0, &mut stream_rng(seed, 5)))?;
        let lift_basis = init_projector(&gaussian_matrix(2 * c, 2 * c, 1.0, &mut stream_rng(seed, 6)))?;
        let lift = lift_basis.w_r().clone();
        let probe = Probe {
            weights: gaussian_matrix(2 * c, cfg.num_classes, 0.01, &mut stream_rng(seed, 7)),
            bias: vec![0.0; cfg.num_classes],
        };
        Ok(Self {
            tokens_r,
            tokens_s,
            dmqa,
            fusion,
            projector,
            lift,
            probe,
        })
    }

    pub fn channels(&self) -> usize {
        self.tokens_r.channels()
    }

    pub fn num_classes(&self) -> usize {
        self.probe.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.tokens_r.tokens().is_finite()
            && self.tokens_s.tokens().is_finite()
            && self.dmqa.alpha_raw.is_finite()
            && self.dmqa.beta_raw.is_finite()
            && self.dmqa.mlp.is_finite()
            && self.fusion.mlp.is_finite()
            && self.probe.weights.is_finite()
            && self.probe.bias.iter().all(|v| v.is_finite())
    }

    /// Number of scalar coordinates in a group.
    pub fn group_len(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::TokensOptical => self.tokens_r.tokens().data().len(),
            ParamGroup::TokensSar => self.tokens_s.tokens().data().len(),
            ParamGroup::TokenMlp => self.dmqa.mlp.params().iter().map(|p| p.len()).sum(),
            ParamGroup::Alpha | ParamGroup::Beta => 1,
            // The output bias shifts both modalities' channel scores equally
            // and cancels in the gate, so it is not a coordinate.
            ParamGroup::FusionMlp => self.fusion.mlp.params()[..3].iter().map(|p| p.len()).sum(),
            ParamGroup::Projector => self.projector.joint().data().len(),
            ParamGroup::Probe => self.probe.weights.data().len() + self.probe.bias.len(),
        }
    }

    fn coord_mut(&mut self, group: ParamGroup, idx: usize) -> &mut f64 {
        match group {
            ParamGroup::TokensOptical => &mut self.tokens_r.tokens_mut().data_mut()[idx],
            ParamGroup::TokensSar => &mut self.tokens_s.tokens_mut().data_mut()[idx],
            ParamGroup::TokenMlp => mlp_coord(&mut self.dmqa.mlp, idx),
            ParamGroup::Alpha => &mut self.dmqa.alpha_raw,
            ParamGroup::Beta => &mut self.dmqa.beta_raw,
            ParamGroup::FusionMlp => mlp_coord(&mut self.fusion.mlp, idx),
            ParamGroup::Projector => panic!("projector coordinates go through perturb"),
            ParamGroup::Probe => {
                let nw = self.probe.weights.data().len();
                if idx < nw {
                    &mut self.probe.weights.data_mut()[idx]
                } else {
                    &mut self.probe.bias[idx - nw]
                }
            }
        }
    }

    pub fn coord(&self, group: ParamGroup, idx: usize) -> f64 {
        match group {
            ParamGroup::Projector => self.projector.joint().data()[idx],
            ParamGroup::TokensOptical => self.tokens_r.tokens().data()[idx],
            ParamGroup::TokensSar => self.tokens_s.tokens().data()[idx],
            ParamGroup::TokenMlp => flat_get(&self.dmqa.mlp.params(), idx),
            ParamGroup::Alpha => self.dmqa.alpha_raw,
            ParamGroup::Beta => self.dmqa.beta_raw,
            ParamGroup::FusionMlp => flat_get(&self.fusion.mlp.params(), idx),
            ParamGroup::Probe => {
                let nw = self.probe.weights.data().len();
                if idx < nw {
                    self.probe.weights.data()[idx]
                } else {
                    self.probe.bias[idx - nw]
                }
            }
        }
    }

    /// Copy with one coordinate shifted by `delta`. Projector entries are
    /// shifted without re-orthogonalization (finite differences need the raw
    /// Euclidean perturbation).
    pub fn perturbed(&self, group: ParamGroup, idx: usize, delta: f64) -> ParamSet {
        let mut p = self.clone();
        if group == ParamGroup::Projector {
            p.projector = self.projector.shifted_unchecked(idx, delta);
        } else {
            *p.coord_mut(group, idx) += delta;
        }
        p
    }
}

fn mlp_coord(mlp: &mut Mlp, mut idx: usize) -> &mut f64 {
    for part in mlp.params_mut() {
        if idx < part.len() {
            return &mut part[idx];
        }
        idx -= part.len();
    }
    panic!("MLP coordinate out of range");
}

fn flat_get(parts: &[&[f64]], mut idx: usize) -> f64 {
    for part in parts {
        if idx < part.len() {
            return part[idx];
        }
        idx -= part.len();
    }
    panic!("coordinate out of range");
}

/// Parameter groups, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TokensOptical,
    TokensSar,
    TokenMlp,
    Alpha,
    Beta,
    FusionMlp,
    Projector,
    Probe,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::TokensOptical,
        ParamGroup::TokensSar,
        ParamGroup::TokenMlp,
        ParamGroup::Alpha,
        ParamGroup::Beta,
        ParamGroup::FusionMlp,
        ParamGroup::Projector,
        ParamGroup::Probe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TokensOptical => "tokens_optical",
            ParamGroup::TokensSar => "tokens_sar",
            ParamGroup::TokenMlp => "token_mlp",
            ParamGroup::Alpha => "alpha_raw",
            ParamGroup::Beta => "beta_raw",
            ParamGroup::FusionMlp => "fusion_mlp",
            ParamGroup::Projector => "projector",
            ParamGroup::Probe => "probe",
        }
    }
}

/// Gradients with the same layout as [`ParamSet`]. The projector entry is
/// the Euclidean gradient with respect to the joint matrix `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tokens_r: Matrix,
    pub tokens_s: Matrix,
    pub token_mlp: Mlp,
    pub alpha_raw: f64,
    pub beta_raw: f64,
    pub fusion_mlp: Mlp,
    pub projector: Matrix,
    pub probe_weights: Matrix,
    pub probe_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &ParamSet) -> Self {
        let mlp_zeros = |m: &Mlp| Mlp::zeros(m.input_dim(), m.hidden_dim(), m.output_dim());
        let n = p.projector.joint().rows();
        Self {
            tokens_r: Matrix::zeros(p.tokens_r.count(), p.channels()),
            tokens_s: Matrix::zeros(p.tokens_s.count(), p.channels()),
            token_mlp: mlp_zeros(&p.dmqa.mlp),
            alpha_raw: 0.0,
            beta_raw: 0.0,
            fusion_mlp: mlp_zeros(&p.fusion.mlp),
            projector: Matrix::zeros(n, n),
            probe_weights: Matrix::zeros(p.probe.weights.rows(), p.probe.weights.cols()),
            probe_bias: vec![0.0; p.probe.bias.len()],
        }
    }

    pub fn coord(&self, group: ParamGroup, idx: usize) -> f64 {
        match group {
            ParamGroup::TokensOptical => self.tokens_r.data()[idx],
            ParamGroup::TokensSar => self.tokens_s.data()[idx],
            ParamGroup::TokenMlp => flat_get(&self.token_mlp.params(), idx),
            ParamGroup::Alpha => self.alpha_raw,
            ParamGroup::Beta => self.beta_raw,
            ParamGroup::FusionMlp => flat_get(&self.fusion_mlp.params(), idx),
            ParamGroup::Projector => self.projector.data()[idx],
            ParamGroup::Probe => {
                let nw = self.probe_weights.data().len();
                if idx < nw {
                    self.probe_weights.data()[idx]
                } else {
                    self.probe_bias[idx - nw]
                }
            }
        }
    }

    pub fn coord_mut(&mut self, group: ParamGroup, idx: usize) -> &mut f64 {
        match group {
            ParamGroup::TokensOptical => &mut self.tokens_r.data_mut()[idx],
            ParamGroup::TokensSar => &mut self.tokens_s.data_mut()[idx],
            ParamGroup::TokenMlp => mlp_coord(&mut self.token_mlp, idx),
            ParamGroup::Alpha => &mut self.alpha_raw,
            ParamGroup::Beta => &mut self.beta_raw,
            ParamGroup::FusionMlp => mlp_coord(&mut self.fusion_mlp, idx),
            ParamGroup::Projector => &mut self.projector.data_mut()[idx],
            ParamGroup::Probe => {
                let nw = self.probe_weights.data().len();
                if idx < nw {
                    &mut self.probe_weights.data_mut()[idx]
                } else {
                    &mut self.probe_bias[idx - nw]
                }
            }
        }
    }

    /// Every coordinate in group order; used for determinism checks.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.tokens_r.data());
        out.extend_from_slice(self.tokens_s.data());
        for p in self.token_mlp.params() {
            out.extend_from_slice(p);
        }
        out.push(self.alpha_raw);
        out.push(self.beta_raw);
        for p in self.fusion_mlp.params() {
            out.extend_from_slice(p);
        }
        out.extend_from_slice(self.projector.data());
        out.extend_from_slice(self.probe_weights.data());
        out.extend_from_slice(&self.probe_bias);
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.flat_mut() {
            *v *= s;
        }
    }

    fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let Gradients {
            tokens_r,
            tokens_s,
            token_mlp,
            alpha_raw,
            beta_raw,
            fusion_mlp,
            projector,
            probe_weights,
            probe_bias,
        } = self;
        let [a, b, c, d] = token_mlp.params_mut();
        let [e, f, g, h] = fusion_mlp.params_mut();
        tokens_r
            .data_mut()
            .iter_mut()
            .chain(tokens_s.data_mut().iter_mut())
            .chain(a.iter_mut())
            .chain(b.iter_mut())
            .chain(c.iter_mut())
            .chain(d.iter_mut())
            .chain(std::iter::once(alpha_raw))
            .chain(std::iter::once(beta_raw))
            .chain(e.iter_mut())
            .chain(f.iter_mut())
            .chain(g.iter_mut())
            .chain(h.iter_mut())
            .chain(projector.data_mut().iter_mut())
            .chain(probe_weights.data_mut().iter_mut())
            .chain(probe_bias.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 1_000_000 + epoch as u64));
    order
}
