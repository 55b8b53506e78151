//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dmqa::FeatureMap;
use crate::error::{Error, Result};
use crate::missing::stream_rng;
use crate::numerics::{Dd, Real};

use super::model::{pipeline_margin, Batch, Objective, ProbeCrossEntropy};
use super::{ModelConfig, ParamGroup, ParamSet, Variant};

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Coordinate attaining the maximum, with both estimates.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, the Richardson
    /// extrapolation of two central differences.
    Central5,
}

impl Stencil {
    /// `f(k)` evaluates the objective at nominal offset `k·h` and returns the
    /// value with the step actually realized in `f64`.
    fn estimate(self, f: impl Fn(f64) -> Result<(Dd, Dd)>) -> Result<f64> {
        let (up, s_up) = f(1.0)?;
        let (down, s_down) = f(-1.0)?;
        let width = s_up - s_down;
        Ok(match self {
            Stencil::Central => ((up - down) / width).to_f64(),
            Stencil::Central5 => {
                let (up2, _) = f(2.0)?;
                let (down2, _) = f(-2.0)?;
                let e = Dd::new(8.0) * (up - down) - (up2 - down2);
                (e / (Dd::new(6.0) * width)).to_f64()
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub h: f64,
    pub stencil: Stencil,
    pub objective: f64,
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn group(&self, group: ParamGroup) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == group)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `objective`'s analytic gradient with central differences of
/// its extended-precision value over the realized steps.
///
/// With `max_coords = Some(m)`, at most `m` coordinates per group are probed,
/// chosen with `seed`. Groups with no coordinates are omitted.
pub fn fd_check(
    params: &ParamSet,
    batch: &Batch,
    objective: &dyn Objective,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradReport> {
    fd_check_with(params, batch, objective, h, Stencil::Central, max_coords, seed)
}

/// [`fd_check`] with a chosen stencil.
pub fn fd_check_with(
    params: &ParamSet,
    batch: &Batch,
    objective: &dyn Objective,
    h: f64,
    stencil: Stencil,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract("fd_check", format!("step {h} must be positive")));
    }
    let (value, grads) = objective.value_and_grad(params, batch)?;
    let mut groups = Vec::new();
    for (gi, group) in ParamGroup::ALL.into_iter().enumerate() {
        let len = params.group_len(group);
        if len == 0 {
            continue;
        }
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < len => {
                let mut picked = index::sample(&mut stream_rng(seed, gi as u64), len, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        let mut report = GroupReport {
            group,
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: coords[0],
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for idx in coords {
            let base = Dd::new(params.coord(group, idx));
            let numeric = stencil.estimate(|k| {
                let p = params.perturbed(group, idx, k * h);
                let step = Dd::new(p.coord(group, idx)) - base;
                Ok((objective.value_extended(&p, batch)?, step))
            })?;
            let analytic = grads.coord(group, idx);
            let err = rel_err(analytic, numeric);
            if err > report.max_rel_err || idx == report.worst_index {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst_index = idx;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
        groups.push(report);
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        h,
        stencil,
        objective: value,
        groups,
        max_rel_err,
    })
}

/// Shape of a randomized gradient-check problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckDims {
    pub batch: usize,
    pub positions: usize,
    pub channels: usize,
    pub tokens: usize,
    pub iterations: usize,
    pub classes: usize,
}

impl CheckDims {
    /// Uniform draw with `B ≤ 2, N ≤ 8, C ≤ 4, K ≤ 4, I ≤ 3`.
    pub fn random(seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        Self {
            batch: rng.random_range(1..=2),
            positions: rng.random_range(2..=8),
            channels: rng.random_range(2..=4),
            tokens: rng.random_range(2..=4),
            iterations: rng.random_range(1..=3),
            classes: 3,
        }
    }
}

/// A parameter point and batch for gradient verification.
#[derive(Clone, Debug)]
pub struct CheckCase {
    pub seed: u64,
    pub dims: CheckDims,
    pub params: ParamSet,
    pub batch: Batch,
    pub margin: f64,
}

fn gaussian_map<R: Rng>(dims: CheckDims, rng: &mut R) -> Result<FeatureMap> {
    let len = dims.batch * dims.positions * dims.channels;
    let values = (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect();
    FeatureMap::new(dims.batch, dims.positions, dims.channels, values)
}

/// Random parameters and Gaussian features. The token-update output layer
/// and the probe are drawn at unit scale so that no group sits at its
/// zero initialization.
pub fn random_case(seed: u64, dims: CheckDims) -> Result<CheckCase> {
    let mut cfg = ModelConfig::new(dims.channels, dims.classes);
    cfg.tokens = dims.tokens;
    cfg.iterations = dims.iterations;
    random_case_for(seed, dims, &cfg)
}

/// [`random_case`] with explicit model widths. `cfg` must agree with `dims`.
pub fn random_case_for(seed: u64, dims: CheckDims, cfg: &ModelConfig) -> Result<CheckCase> {
    if (cfg.channels, cfg.tokens, cfg.iterations, cfg.num_classes)
        != (dims.channels, dims.tokens, dims.iterations, dims.classes)
    {
        return Err(Error::contract("random_case_for", "model config disagrees with dims"));
    }
    let mut params = ParamSet::init(cfg, seed)?;
    let mut rng = stream_rng(seed, 100);
    for v in params.dmqa.mlp.w2.data_mut() {
        *v = 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    for v in params.probe.weights.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    params.dmqa.alpha_raw = rng.random_range(-1.0..1.0);
    params.dmqa.beta_raw = rng.random_range(-1.0..1.0);
    let optical = gaussian_map(dims, &mut rng)?;
    let sar = gaussian_map(dims, &mut rng)?;
    let labels = (0..dims.batch).map(|_| rng.random_range(0..dims.classes)).collect();
    let batch = Batch::new(optical, sar, labels)?;
    let margin = pipeline_margin(&params, Variant::Full, &batch)?;
    Ok(CheckCase {
        seed,
        dims,
        params,
        batch,
        margin,
    })
}

fn search(seed: u64, min_margin: f64, make: impl Fn(u64) -> Result<CheckCase>) -> Result<CheckCase> {
    const ATTEMPTS: u64 = 1000;
    for attempt in 0..ATTEMPTS {
        let case = make(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)))?;
        if case.margin >= min_margin {
            return Ok(case);
        }
    }
    Err(Error::degenerate(
        "boundary_free_case",
        format!("no case with margin {min_margin} in {ATTEMPTS} attempts"),
    ))
}

/// Draws cases from `seed` onward until one lies at least `min_margin` away
/// from every non-differentiable point.
pub fn boundary_free_case(
    seed: u64,
    dims: impl Fn(u64) -> CheckDims,
    min_margin: f64,
) -> Result<CheckCase> {
    search(seed, min_margin, |s| random_case(s, dims(s)))
}

/// [`boundary_free_case`] at fixed dims and model widths.
pub fn boundary_free_case_for(seed: u64, dims: CheckDims, cfg: &ModelConfig, min_margin: f64) -> Result<CheckCase> {
    search(seed, min_margin, |s| random_case_for(s, dims, cfg))
}

/// One verified case of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub seed: u64,
    pub dims: CheckDims,
    pub margin: f64,
    pub report: GradReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub h: f64,
    pub stencil: Stencil,
    pub cases: Vec<CaseReport>,
    pub max_rel_err: f64,
}

/// Full-variant checks over `count` boundary-free random cases.
pub fn check_suite(seed: u64, count: usize, h: f64, stencil: Stencil, min_margin: f64) -> Result<SuiteReport> {
    let objective = ProbeCrossEntropy::new(Variant::Full);
    let mut cases = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let case = boundary_free_case(seed.wrapping_mul(1000).wrapping_add(i), CheckDims::random, min_margin)?;
        let report = fd_check_with(&case.params, &case.batch, &objective, h, stencil, None, 0)?;
        cases.push(CaseReport {
            seed: case.seed,
            dims: case.dims,
            margin: case.margin,
            report,
        });
    }
    let max_rel_err = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    Ok(SuiteReport {
        h,
        stencil,
        cases,
        max_rel_err,
    })
}
