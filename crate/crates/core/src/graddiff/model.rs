//! Forward pass with stored intermediates and its hand-written adjoint.

use crate::dmqa::{assess_sample, FeatureMap, SampleTape, ScoreParts};
use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpCache};
use crate::numerics::{matmul_nt, matmul_tn, matmul_unchecked, softmax_in_place, softmax_rows_backward, Dd, Matrix};

use super::{Gradients, ParamSet, Variant};

/// Two co-registered feature maps and one class label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub optical: FeatureMap,
    pub sar: FeatureMap,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(optical: FeatureMap, sar: FeatureMap, labels: Vec<usize>) -> Result<Self> {
        if optical.shape() != sar.shape() || labels.len() != optical.samples() {
            return Err(Error::contract(
                "Batch::new",
                format!(
                    "optical {:?}, SAR {:?}, {} labels",
                    optical.shape(),
                    sar.shape(),
                    labels.len()
                ),
            ));
        }
        Ok(Self {
            optical,
            sar,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            optical: self.optical.select(indices),
            sar: self.sar.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// A scalar objective over parameters and a batch, with its gradient.
pub trait Objective {
    fn value(&self, params: &ParamSet, batch: &Batch) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, Gradients)>;

    /// The value in double-double precision, used by finite differences.
    fn value_extended(&self, params: &ParamSet, batch: &Batch) -> Result<Dd> {
        self.value(params, batch).map(Dd::new)
    }
}

/// Mean cross-entropy of the linear probe on pooled fused features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeCrossEntropy {
    pub variant: Variant,
}

struct ModalityForward {
    features: Matrix,
    mean: Vec<f64>,
    tape: Option<SampleTape>,
    fusion_input: Matrix,
    fusion_cache: Option<MlpCache>,
    channel_reliability: Vec<f64>,
    projected_mean: Vec<f64>,
}

struct SampleForward {
    optical: ModalityForward,
    sar: ModalityForward,
    gamma_r: Vec<f64>,
    gamma_s: Vec<f64>,
    pooled: Vec<f64>,
    probs: Vec<f64>,
    logits: Vec<f64>,
}

/// Per-sample outputs used for evaluation and reliability export.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub logits: Vec<f64>,
    pub gamma_r: Vec<f64>,
    pub gamma_s: Vec<f64>,
    /// Final `(L, D, R)` per position and modality; `None` when the variant
    /// does not assess reliability.
    pub optical: Option<[Vec<f64>; 3]>,
    pub sar: Option<[Vec<f64>; 3]>,
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m[(i, j)]).sum::<f64>() / n)
        .collect()
}

fn apply(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn modality_forward(
    params: &ParamSet,
    variant: Variant,
    features: Matrix,
    tokens: &Matrix,
    projection: &Matrix,
) -> Result<ModalityForward> {
    let mean = column_means(&features);
    let projected_mean = apply(projection, &mean);
    let (tape, fusion_input, fusion_cache, channel_reliability) = if variant.uses_reliability() {
        let tape = assess_sample(&features, tokens, &params.dmqa)?;
        let pooled = tape.combined.iter().sum::<f64>() / tape.combined.len() as f64;
        let input = Matrix::new(1, 1, vec![pooled]).expect("1x1");
        let (out, cache) = params.fusion.mlp.forward_cached(&input);
        (Some(tape), input, Some(cache), out.into_data())
    } else {
        let zeros = vec![0.0; projection.rows()];
        (None, Matrix::zeros(1, 1), None, zeros)
    };
    Ok(ModalityForward {
        features,
        mean,
        tape,
        fusion_input,
        fusion_cache,
        channel_reliability,
        projected_mean,
    })
}

fn projections(params: &ParamSet, variant: Variant) -> (&Matrix, &Matrix) {
    if variant.uses_projector() {
        (params.projector.w_r(), params.projector.w_s())
    } else {
        (&params.lift, &params.lift)
    }
}

fn sample_forward(params: &ParamSet, variant: Variant, batch: &Batch, b: usize) -> Result<SampleForward> {
    let (w_r, w_s) = projections(params, variant);
    let optical = modality_forward(params, variant, batch.optical.sample(b), params.tokens_r.tokens(), w_r)?;
    let sar = modality_forward(params, variant, batch.sar.sample(b), params.tokens_s.tokens(), w_s)?;

    // Uniform reliabilities give equal channel vectors and hence γ = ½.
    let (gamma_r, gamma_s) = crate::ocnf::fusion_weights(&optical.channel_reliability, &sar.channel_reliability)?;
    let pooled: Vec<f64> = (0..gamma_r.len())
        .map(|c| gamma_r[c] * optical.projected_mean[c] + gamma_s[c] * sar.projected_mean[c])
        .collect();
    let mut logits = params.probe.bias.clone();
    for (c, z) in pooled.iter().enumerate() {
        for (l, w) in logits.iter_mut().zip(params.probe.weights.row(c)) {
            *l += z * w;
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "probe" });
    }
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    Ok(SampleForward {
        optical,
        sar,
        gamma_r,
        gamma_s,
        pooled,
        probs,
        logits,
    })
}

pub(crate) fn check_batch(params: &ParamSet, batch: &Batch) -> Result<()> {
    if batch.optical.channels() != params.channels() {
        return Err(Error::contract(
            "forward",
            format!(
                "batch has {} channels, parameters expect {}",
                batch.optical.channels(),
                params.channels()
            ),
        ));
    }
    if let Some(l) = batch.labels.iter().find(|l| **l >= params.num_classes()) {
        return Err(Error::contract("forward", format!("label {l} out of range")));
    }
    Ok(())
}

/// Forward pass only; returns per-sample logits, fusion weights and scores.
pub fn sample_outputs(params: &ParamSet, variant: Variant, batch: &Batch) -> Result<Vec<SampleOutput>> {
    check_batch(params, batch)?;
    (0..batch.len())
        .map(|b| {
            let fwd = sample_forward(params, variant, batch, b)?;
            let scores = |m: &ModalityForward| {
                m.tape.as_ref().map(|t| {
                    [
                        t.last.magnitude.score.clone(),
                        t.last.direction.score.clone(),
                        t.combined.clone(),
                    ]
                })
            };
            Ok(SampleOutput {
                optical: scores(&fwd.optical),
                sar: scores(&fwd.sar),
                logits: fwd.logits,
                gamma_r: fwd.gamma_r,
                gamma_s: fwd.gamma_s,
            })
        })
        .collect()
}

/// Arg-max class per sample.
pub fn predict(params: &ParamSet, variant: Variant, batch: &Batch) -> Result<Vec<usize>> {
    Ok(sample_outputs(params, variant, batch)?
        .into_iter()
        .map(|o| {
            let mut best = 0;
            for (i, v) in o.logits.iter().enumerate() {
                if *v > o.logits[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Smallest distance, over the whole batch, to a point where the pipeline
/// is not differentiable: ties in either arg-max, a zero magnitude deviation,
/// or a direction score touching the clamp.
pub fn pipeline_margin(params: &ParamSet, variant: Variant, batch: &Batch) -> Result<f64> {
    check_batch(params, batch)?;
    let mut margin = f64::INFINITY;
    if !variant.uses_reliability() {
        return Ok(margin);
    }
    for b in 0..batch.len() {
        let fwd = sample_forward(params, variant, batch, b)?;
        for m in [&fwd.optical, &fwd.sar] {
            let tape = m.tape.as_ref().expect("reliability variant keeps tapes");
            let passes = tape.iterations.iter().map(|it| &it.scores).chain(std::iter::once(&tape.last));
            for sp in passes {
                margin = margin.min(score_margin(sp));
            }
        }
    }
    Ok(margin)
}

fn score_margin(sp: &ScoreParts) -> f64 {
    let mut margin = f64::INFINITY;
    let mag = &sp.magnitude;
    let top = mag.signed[mag.argmax].abs();
    for (i, s) in mag.signed.iter().enumerate() {
        margin = margin.min(s.abs());
        if i != mag.argmax {
            margin = margin.min(top - s.abs());
        }
    }
    let dir = &sp.direction;
    for i in 0..dir.raw.len() {
        if dir.best[i].is_none() {
            continue;
        }
        margin = margin
            .min(dir.raw[i].abs())
            .min((1.0 - dir.raw[i]).abs());
        if dir.runner_up[i].is_finite() {
            margin = margin.min(dir.raw[i] - dir.runner_up[i]);
        }
    }
    margin
}

impl ProbeCrossEntropy {
    pub fn new(variant: Variant) -> Self {
        Self { variant }
    }
}

fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

impl Objective for ProbeCrossEntropy {
    fn value(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        check_batch(params, batch)?;
        if batch.is_empty() {
            return Err(Error::contract("objective", "empty batch"));
        }
        let mut total = 0.0;
        for b in 0..batch.len() {
            let fwd = sample_forward(params, self.variant, batch, b)?;
            total += cross_entropy(&fwd.probs, batch.labels[b]);
        }
        Ok(total / batch.len() as f64)
    }

    fn value_extended(&self, params: &ParamSet, batch: &Batch) -> Result<Dd> {
        super::reference::reference_loss(params, self.variant, batch)
    }

    fn value_and_grad(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, Gradients)> {
        check_batch(params, batch)?;
        if batch.is_empty() {
            return Err(Error::contract("objective", "empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Gradients::zeros_like(params);
        let mut total = 0.0;
        for b in 0..batch.len() {
            let fwd = sample_forward(params, self.variant, batch, b)?;
            let label = batch.labels[b];
            total += cross_entropy(&fwd.probs, label);
            let mut d_logits = fwd.probs.clone();
            d_logits[label] -= 1.0;
            d_logits.iter_mut().for_each(|v| *v *= scale);
            sample_backward(params, self.variant, &fwd, &d_logits, &mut grads)?;
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok((total * scale, grads))
    }
}

/// Reverse pass through one sample.
fn sample_backward(
    params: &ParamSet,
    variant: Variant,
    fwd: &SampleForward,
    d_logits: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let width = fwd.pooled.len();
    // logits = z·Wp + bp
    let mut d_pooled = vec![0.0; width];
    for c in 0..width {
        let row = params.probe.weights.row(c);
        let grow = grads.probe_weights.row_mut(c);
        for k in 0..d_logits.len() {
            grow[k] += fwd.pooled[c] * d_logits[k];
        }
        d_pooled[c] = row.iter().zip(d_logits).map(|(w, d)| w * d).sum();
    }
    for (g, d) in grads.probe_bias.iter_mut().zip(d_logits) {
        *g += d;
    }

    // z = γ_R ⊙ W_R x̄_R + γ_S ⊙ W_S x̄_S, with γ_S = 1 − γ_R
    let mut d_gamma_r = vec![0.0; width];
    let mut d_proj_r = vec![0.0; width];
    let mut d_proj_s = vec![0.0; width];
    for c in 0..width {
        d_gamma_r[c] = d_pooled[c] * (fwd.optical.projected_mean[c] - fwd.sar.projected_mean[c]);
        d_proj_r[c] = d_pooled[c] * fwd.gamma_r[c];
        d_proj_s[c] = d_pooled[c] * fwd.gamma_s[c];
    }

    if variant.uses_projector() {
        let c_in = params.channels();
        let s = 1.0 / (c_in as f64).sqrt();
        for i in 0..width {
            for j in 0..c_in {
                grads.projector[(i, j)] += s * d_proj_r[i] * fwd.optical.mean[j];
                grads.projector[(i, c_in + j)] += s * d_proj_s[i] * fwd.sar.mean[j];
            }
        }
    }

    if variant.uses_reliability() {
        // γ_R = σ(R̃_R − R̃_S)
        let d_diff: Vec<f64> = d_gamma_r
            .iter()
            .zip(&fwd.gamma_r)
            .map(|(d, g)| d * g * (1.0 - g))
            .collect();
        let neg: Vec<f64> = d_diff.iter().map(|v| -v).collect();
        for (m, d_rt, d_tokens) in [
            (&fwd.optical, d_diff.as_slice(), &mut grads.tokens_r),
            (&fwd.sar, neg.as_slice(), &mut grads.tokens_s),
        ] {
            let d_out = Matrix::new(1, width, d_rt.to_vec()).expect("row vector");
            let cache = m.fusion_cache.as_ref().expect("reliability variant caches");
            let d_in = params
                .fusion
                .mlp
                .backward(&m.fusion_input, cache, &d_out, &mut grads.fusion_mlp);
            let d_pooled_rel = d_in[(0, 0)];
            let tape = m.tape.as_ref().expect("reliability variant keeps tapes");
            let n = tape.combined.len();
            let d_r = vec![d_pooled_rel / n as f64; n];
            let (d_t0, d_alpha, d_beta) =
                dmqa_backward(params, &m.features, tape, &d_r, &mut grads.token_mlp);
            d_tokens.add_scaled(&d_t0, 1.0);
            grads.alpha_raw += d_alpha;
            grads.beta_raw += d_beta;
        }
    }
    Ok(())
}

/// Adjoint of the iterative assessment. Returns gradients with respect to
/// the initial tokens, `alpha_raw` and `beta_raw`; token MLP gradients are
/// accumulated into `d_mlp`.
fn dmqa_backward(
    params: &ParamSet,
    f: &Matrix,
    tape: &SampleTape,
    d_r: &[f64],
    d_mlp: &mut Mlp,
) -> (Matrix, f64, f64) {
    let dmqa = &params.dmqa;
    let alpha = dmqa.alpha();
    let beta = dmqa.beta();
    let mlp = &dmqa.mlp;
    let inv_sqrt_c = 1.0 / (f.cols() as f64).sqrt();

    // R = β L + (1 − β) D on the final tokens.
    let last = &tape.last;
    let mut d_beta = 0.0;
    for (i, d) in d_r.iter().enumerate() {
        d_beta += d * (last.magnitude.score[i] - last.direction.score[i]);
    }
    let d_l: Vec<f64> = d_r.iter().map(|d| beta * d).collect();
    let d_d: Vec<f64> = d_r.iter().map(|d| (1.0 - beta) * d).collect();
    let mut d_tokens = Matrix::zeros(last.tokens.rows(), last.tokens.cols());
    score_backward(f, &tape.feature_norms, last, &d_l, &d_d, &mut d_tokens);

    let mut d_alpha = 0.0;
    for it in tape.iterations.iter().rev() {
        // T⁺ = MLP(A F) + T
        let d_next = d_tokens;
        let mut d_cur = d_next.clone();
        let upd = &it.update;
        let d_agg = mlp.backward(&upd.aggregated, &upd.mlp, &d_next, d_mlp);
        let d_attn = matmul_nt(&d_agg, f);
        let d_mod = softmax_rows_backward(&upd.attention, &d_attn);
        let n = f.rows();
        let mut d_logits = Matrix::zeros(d_mod.rows(), n);
        let mut d_rel = vec![0.0; n];
        for k in 0..d_mod.rows() {
            for i in 0..n {
                d_logits[(k, i)] = d_mod[(k, i)] * it.combined[i];
                d_rel[i] += d_mod[(k, i)] * upd.logits[(k, i)];
            }
        }
        // logits = T Fᵀ / √C
        d_cur.add_scaled(&matmul_unchecked(&d_logits, f), inv_sqrt_c);

        // R⁽ᵗ⁾ = α L⁽ᵗ⁾ + (1 − α) D⁽ᵗ⁾
        let sp = &it.scores;
        for i in 0..n {
            d_alpha += d_rel[i] * (sp.magnitude.score[i] - sp.direction.score[i]);
        }
        let d_l: Vec<f64> = d_rel.iter().map(|d| alpha * d).collect();
        let d_d: Vec<f64> = d_rel.iter().map(|d| (1.0 - alpha) * d).collect();
        score_backward(f, &tape.feature_norms, sp, &d_l, &d_d, &mut d_cur);
        d_tokens = d_cur;
    }
    (
        d_tokens,
        d_alpha * alpha * (1.0 - alpha),
        d_beta * beta * (1.0 - beta),
    )
}

/// Accumulates into `d_tokens` the gradient of `⟨d_l, L⟩ + ⟨d_d, D⟩` with
/// respect to the tokens the scores were computed against.
fn score_backward(
    f: &Matrix,
    feature_norms: &[f64],
    sp: &ScoreParts,
    d_l: &[f64],
    d_d: &[f64],
    d_tokens: &mut Matrix,
) {
    let n = f.rows();
    let k_count = sp.tokens.rows();
    let inv_sqrt_c = 1.0 / (f.cols() as f64).sqrt();
    let mag = &sp.magnitude;

    // L(i) = 1 − |s(i)| / (|s(m)| + ε), s = ‖F‖ − expected
    let mut d_abs = vec![0.0; n];
    let mut d_top = 0.0;
    for i in 0..n {
        d_abs[i] -= d_l[i] / mag.denom;
        d_top += d_l[i] * mag.signed[i].abs() / (mag.denom * mag.denom);
    }
    d_abs[mag.argmax] += d_top;
    // d|s|/d expected = −sign(s)
    let d_expected: Vec<f64> = d_abs
        .iter()
        .zip(&mag.signed)
        .map(|(d, s)| {
            let sign = if *s > 0.0 {
                1.0
            } else if *s < 0.0 {
                -1.0
            } else {
                0.0
            };
            -sign * d
        })
        .collect();

    // expected(i) = Σ_k W(i,k) ‖T(k)‖
    let mut d_weights = Matrix::zeros(n, k_count);
    let mut d_norms = vec![0.0; k_count];
    for i in 0..n {
        for k in 0..k_count {
            d_weights[(i, k)] = d_expected[i] * sp.token_norms[k];
            d_norms[k] += d_expected[i] * sp.weights[(i, k)];
        }
    }
    // W = softmax(F Tᵀ / √C) per position
    let d_scores = softmax_rows_backward(&sp.weights, &d_weights);
    d_tokens.add_scaled(&matmul_tn(&d_scores, f), inv_sqrt_c);
    for k in 0..k_count {
        let tn = sp.token_norms[k];
        let g = d_norms[k] / tn;
        for (dt, t) in d_tokens.row_mut(k).iter_mut().zip(sp.tokens.row(k)) {
            *dt += g * t;
        }
    }

    // D(i) = clamp(cos(F(i), T(k*)), 0, 1)
    let dir = &sp.direction;
    for i in 0..n {
        let Some(k) = dir.best[i] else { continue };
        let raw = dir.raw[i];
        if !(raw > 0.0 && raw < 1.0) || d_d[i] == 0.0 {
            continue;
        }
        let fnorm = feature_norms[i];
        let tn = sp.token_norms[k];
        let a = d_d[i] / (fnorm * tn);
        let b = d_d[i] * raw / (tn * tn);
        for ((dt, fv), tv) in d_tokens
            .row_mut(k)
            .iter_mut()
            .zip(f.row(i))
            .zip(sp.tokens.row(k))
        {
            *dt += a * fv - b * tv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graddiff::{boundary_free_case, check_suite, fd_check, random_case, CheckDims, ParamGroup, Stencil};

    fn setup(seed: u64, b: usize, n: usize, c: usize, k: usize, iters: usize) -> (ParamSet, Batch) {
        let dims = CheckDims {
            batch: b,
            positions: n,
            channels: c,
            tokens: k,
            iterations: iters,
            classes: 3,
        };
        let case = random_case(seed, dims).unwrap();
        (case.params, case.batch)
    }

    #[test]
    fn full_pipeline_matches_central_differences() {
        let dims = CheckDims {
            batch: 2,
            positions: 8,
            channels: 4,
            tokens: 3,
            iterations: 2,
            classes: 3,
        };
        let case = boundary_free_case(0, |_| dims, 1e-3).unwrap();
        let (params, batch) = (case.params, case.batch);
        let obj = ProbeCrossEntropy::new(Variant::Full);
        let report = fd_check(&params, &batch, &obj, 1e-5, None, 0).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:#?}");
        assert!(report.groups.iter().all(|g| g.coords_checked > 0));
    }

    #[test]
    fn suite_within_tolerance() {
        let suite = check_suite(1, 5, 1e-5, Stencil::Central, 1e-3).unwrap();
        assert!(suite.max_rel_err < 1e-5, "{suite:#?}");
    }

    #[test]
    fn every_variant_matches_central_differences() {
        let (params, batch) = setup(3, 2, 5, 3, 2, 1);
        for variant in Variant::ALL {
            let obj = ProbeCrossEntropy::new(variant);
            let report = fd_check(&params, &batch, &obj, 1e-5, None, 0).unwrap();
            assert!(report.max_rel_err < 1e-5, "{variant}: {report:#?}");
        }
    }

    #[test]
    fn unused_groups_have_zero_gradient() {
        let (params, batch) = setup(1, 2, 4, 3, 2, 1);
        let (_, grads) = ProbeCrossEntropy::new(Variant::MeanBaseline)
            .value_and_grad(&params, &batch)
            .unwrap();
        for group in [
            ParamGroup::TokensOptical,
            ParamGroup::TokensSar,
            ParamGroup::TokenMlp,
            ParamGroup::Alpha,
            ParamGroup::Beta,
            ParamGroup::FusionMlp,
            ParamGroup::Projector,
        ] {
            for i in 0..params.group_len(group) {
                assert_eq!(grads.coord(group, i), 0.0, "{}", group.name());
            }
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let (params, batch) = setup(4, 2, 6, 4, 3, 2);
        let obj = ProbeCrossEntropy::new(Variant::Full);
        let (va, ga) = obj.value_and_grad(&params, &batch).unwrap();
        let (vb, gb) = obj.value_and_grad(&params, &batch).unwrap();
        assert_eq!(va.to_bits(), vb.to_bits());
        let bits = |g: &Gradients| g.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ga), bits(&gb));
    }

    #[test]
    fn pooled_forward_matches_fused_map_mean() {
        let (params, batch) = setup(6, 1, 5, 3, 2, 1);
        let out = &sample_outputs(&params, Variant::Full, &batch).unwrap()[0];
        let fused = crate::ocnf::fuse_projected(
            &batch.optical,
            &batch.sar,
            params.projector.w_r(),
            params.projector.w_s(),
            &[out.gamma_r.clone()],
            &[out.gamma_s.clone()],
        )
        .unwrap();
        let mean = column_means(&fused.sample(0));
        let mut logits = params.probe.bias.clone();
        for (c, z) in mean.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(params.probe.weights.row(c)) {
                *l += z * w;
            }
        }
        for (a, b) in logits.iter().zip(&out.logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let (params, mut batch) = setup(0, 1, 2, 3, 2, 1);
        batch.labels[0] = 7;
        assert!(ProbeCrossEntropy::new(Variant::Full).value(&params, &batch).is_err());
    }
}
