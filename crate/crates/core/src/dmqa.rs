//! Dynamic modality quality assessment.
//!
//! Each modality owns a bank of `K` reference tokens. At every iteration a
//! feature vector is scored twice against the bank:
//!
//! * magnitude: how far its norm sits from the token-weighted expected norm,
//!   normalized by the largest such deviation in the sample,
//! * direction: its best cosine alignment with any token, clamped to `[0, 1]`.
//!
//! The convex mix of the two modulates a token-to-position attention map whose
//! aggregate refines the tokens through a residual MLP. After the last
//! iteration the scores are recomputed against the refined tokens and mixed
//! with a second learnable weight.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpCache};
use crate::numerics::{l2_norm, matmul_nt, matmul_unchecked, row_l2_norms, softmax_rows, Matrix};

/// Smallest admissible token norm.
pub const MIN_TOKEN_NORM: f64 = 1e-8;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_TOKENS: usize = 16;
pub const DEFAULT_ITERATIONS: usize = 4;

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Per-modality features, `samples × positions × channels`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    samples: usize,
    positions: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(samples: usize, positions: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if positions == 0 || channels == 0 {
            return Err(Error::contract(
                "FeatureMap::new",
                "positions and channels must be at least 1",
            ));
        }
        if values.len() != samples * positions * channels {
            return Err(Error::contract(
                "FeatureMap::new",
                format!(
                    "{} values for shape ({samples}, {positions}, {channels})",
                    values.len()
                ),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "FeatureMap::new" });
        }
        Ok(Self {
            samples,
            positions,
            channels,
            values,
        })
    }

    pub fn zeros(samples: usize, positions: usize, channels: usize) -> Self {
        Self {
            samples,
            positions,
            channels,
            values: vec![0.0; samples * positions * channels],
        }
    }

    /// Stacks per-sample `positions × channels` matrices.
    pub fn from_samples(slices: &[Matrix]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::contract("FeatureMap::from_samples", "no samples"))?;
        let (n, c) = (first.rows(), first.cols());
        if slices.iter().any(|m| m.rows() != n || m.cols() != c) {
            return Err(Error::contract("FeatureMap::from_samples", "ragged samples"));
        }
        let values = slices.iter().flat_map(|m| m.data().iter().copied()).collect();
        Self::new(slices.len(), n, c, values)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.samples, self.positions, self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_slice(&self, b: usize) -> &[f64] {
        let len = self.positions * self.channels;
        &self.values[b * len..(b + 1) * len]
    }

    pub fn sample_slice_mut(&mut self, b: usize) -> &mut [f64] {
        let len = self.positions * self.channels;
        &mut self.values[b * len..(b + 1) * len]
    }

    /// Copy of one sample as a `positions × channels` matrix.
    pub fn sample(&self, b: usize) -> Matrix {
        Matrix::new(self.positions, self.channels, self.sample_slice(b).to_vec())
            .expect("slice length matches shape")
    }

    /// Keeps only the listed samples, in order.
    pub fn select(&self, indices: &[usize]) -> FeatureMap {
        let values = indices
            .iter()
            .flat_map(|&b| self.sample_slice(b).iter().copied())
            .collect();
        FeatureMap {
            samples: indices.len(),
            positions: self.positions,
            channels: self.channels,
            values,
        }
    }
}

/// Learnable reference tokens for one modality, one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBank {
    tokens: Matrix,
    iteration: usize,
}

impl TokenBank {
    pub fn new(tokens: Matrix) -> Result<Self> {
        Self::with_iteration(tokens, 0)
    }

    pub(crate) fn with_iteration(tokens: Matrix, iteration: usize) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::contract("TokenBank::new", "at least one token required"));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite { op: "TokenBank" });
        }
        if let Some((k, norm)) = row_l2_norms(&tokens)
            .into_iter()
            .enumerate()
            .find(|(_, n)| *n < MIN_TOKEN_NORM)
        {
            return Err(Error::degenerate(
                "TokenBank",
                format!("token {k} has norm {norm:e}"),
            ));
        }
        Ok(Self { tokens, iteration })
    }

    /// Seeded Gaussian rows rescaled to unit norm.
    pub fn random<R: Rng + ?Sized>(count: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let mut tokens = Matrix::from_fn(count, channels, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        for k in 0..count {
            let row = tokens.row_mut(k);
            let n = l2_norm(row).max(MIN_TOKEN_NORM);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(tokens)
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub(crate) fn tokens_mut(&mut self) -> &mut Matrix {
        &mut self.tokens
    }

    /// Re-checks the bank invariants after an in-place parameter update.
    pub fn validate(&self) -> Result<()> {
        Self::with_iteration(self.tokens.clone(), self.iteration).map(|_| ())
    }
}

/// Mixing weights, stability constant, iteration count and token-update MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmqaParams {
    /// `α = logistic(alpha_raw)` mixes the in-loop scores.
    pub alpha_raw: f64,
    /// `β = logistic(beta_raw)` mixes the final scores.
    pub beta_raw: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub mlp: Mlp,
}

impl DmqaParams {
    /// Defaults: `α = β = 0.5`, `ε = 1e-6`, hidden width `2C`, and a
    /// zero output layer so the initial token update is the identity.
    pub fn new<R: Rng + ?Sized>(channels: usize, iterations: usize, rng: &mut R) -> Self {
        Self {
            alpha_raw: 0.0,
            beta_raw: 0.0,
            epsilon: DEFAULT_EPSILON,
            iterations,
            mlp: Mlp::init(channels, 2 * channels, channels, 0.0, rng),
        }
    }

    pub fn alpha(&self) -> f64 {
        logistic(self.alpha_raw)
    }

    pub fn beta(&self) -> f64 {
        logistic(self.beta_raw)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::contract("DmqaParams", "epsilon must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::contract("DmqaParams", "at least one iteration required"));
        }
        if self.mlp.input_dim() != channels || self.mlp.output_dim() != channels {
            return Err(Error::contract(
                "DmqaParams",
                format!(
                    "token MLP maps {} -> {}, tokens have {channels} channels",
                    self.mlp.input_dim(),
                    self.mlp.output_dim()
                ),
            ));
        }
        if !self.alpha_raw.is_finite() || !self.beta_raw.is_finite() || !self.mlp.is_finite() {
            return Err(Error::NonFinite { op: "DmqaParams" });
        }
        Ok(())
    }
}

/// Magnitude and direction scores of one iteration, `samples × positions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationScores {
    pub magnitude: Vec<f64>,
    pub direction: Vec<f64>,
}

/// Output of [`dmqa_assess`]. Score vectors are `samples × positions`,
/// row-major; tokens evolve per sample so one final bank is kept per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityResult {
    pub samples: usize,
    pub positions: usize,
    pub magnitude: Vec<f64>,
    pub direction: Vec<f64>,
    pub combined: Vec<f64>,
    pub final_tokens: Vec<TokenBank>,
    /// In-loop scores per iteration, filled only by [`dmqa_assess_traced`].
    pub trace: Vec<IterationScores>,
}

impl ReliabilityResult {
    pub fn combined_for(&self, b: usize) -> &[f64] {
        &self.combined[b * self.positions..(b + 1) * self.positions]
    }

    /// Mean of the combined score over positions, per sample.
    pub fn pooled(&self) -> Vec<f64> {
        (0..self.samples)
            .map(|b| self.combined_for(b).iter().sum::<f64>() / self.positions as f64)
            .collect()
    }
}

fn check_channels(op: &'static str, f: &Matrix, t: &TokenBank) -> Result<()> {
    if f.cols() != t.channels() {
        return Err(Error::contract(
            op,
            format!("features have {} channels, tokens {}", f.cols(), t.channels()),
        ));
    }
    Ok(())
}

/// Per-position softmax over tokens of `F(i)·T(k) / √C`, an `N × K` matrix.
pub fn token_attention(f: &Matrix, t: &TokenBank) -> Result<Matrix> {
    check_channels("token_attention", f, t)?;
    Ok(attention_weights(f, t.tokens()))
}

pub(crate) fn attention_weights(f: &Matrix, tokens: &Matrix) -> Matrix {
    let scale = 1.0 / (f.cols() as f64).sqrt();
    softmax_rows(&matmul_nt(f, tokens).scale(scale))
}

/// Intermediates of the magnitude score for one sample.
#[derive(Clone, Debug)]
pub(crate) struct MagnitudeParts {
    /// `‖F(i)‖ − expected(i)`; the deviation is its absolute value.
    pub signed: Vec<f64>,
    pub argmax: usize,
    /// `max_j δ(j) + ε`.
    pub denom: f64,
    pub score: Vec<f64>,
}

pub(crate) fn magnitude_parts(
    feature_norms: &[f64],
    token_norms: &[f64],
    weights: &Matrix,
    epsilon: f64,
) -> MagnitudeParts {
    let expected: Vec<f64> = (0..weights.rows())
        .map(|i| {
            weights
                .row(i)
                .iter()
                .zip(token_norms)
                .map(|(w, n)| w * n)
                .sum()
        })
        .collect();
    let signed: Vec<f64> = feature_norms
        .iter()
        .zip(&expected)
        .map(|(f, l)| f - l)
        .collect();
    let mut argmax = 0;
    for (i, s) in signed.iter().enumerate() {
        if s.abs() > signed[argmax].abs() {
            argmax = i;
        }
    }
    let denom = signed[argmax].abs() + epsilon;
    let score = signed.iter().map(|s| 1.0 - s.abs() / denom).collect();
    MagnitudeParts {
        signed,
        argmax,
        denom,
        score,
    }
}

/// `1 − |‖F(i)‖ − Σ_k w(i,k)‖T(k)‖| / (max_j δ(j) + ε)` for one sample.
pub fn magnitude_reliability(f: &Matrix, t: &TokenBank, w: &Matrix, epsilon: f64) -> Result<Vec<f64>> {
    check_channels("magnitude_reliability", f, t)?;
    if w.rows() != f.rows() || w.cols() != t.count() {
        return Err(Error::contract(
            "magnitude_reliability",
            format!(
                "weights are {}x{}, expected {}x{}",
                w.rows(),
                w.cols(),
                f.rows(),
                t.count()
            ),
        ));
    }
    let parts = magnitude_parts(&row_l2_norms(f), &row_l2_norms(t.tokens()), w, epsilon);
    Ok(parts.score)
}

/// Intermediates of the direction score for one sample.
#[derive(Clone, Debug)]
pub(crate) struct DirectionParts {
    /// Index of the best-aligned token, `None` for a zero feature vector.
    pub best: Vec<Option<usize>>,
    /// Unclamped best cosine (0 for zero features).
    pub raw: Vec<f64>,
    /// Runner-up cosine, for boundary diagnostics.
    pub runner_up: Vec<f64>,
    pub score: Vec<f64>,
}

pub(crate) fn direction_parts(
    f: &Matrix,
    feature_norms: &[f64],
    tokens: &Matrix,
    token_norms: &[f64],
) -> DirectionParts {
    let n = f.rows();
    let mut best = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    let mut runner_up = Vec::with_capacity(n);
    let dots = matmul_nt(f, tokens);
    for i in 0..n {
        if feature_norms[i] == 0.0 {
            best.push(None);
            raw.push(0.0);
            runner_up.push(f64::NEG_INFINITY);
            continue;
        }
        let mut top = (0usize, f64::NEG_INFINITY);
        let mut second = f64::NEG_INFINITY;
        for (k, d) in dots.row(i).iter().enumerate() {
            let cos = d / (feature_norms[i] * token_norms[k]);
            if cos > top.1 {
                second = top.1;
                top = (k, cos);
            } else if cos > second {
                second = cos;
            }
        }
        best.push(Some(top.0));
        raw.push(top.1);
        runner_up.push(second);
    }
    let score = raw.iter().map(|c| c.clamp(0.0, 1.0)).collect();
    DirectionParts {
        best,
        raw,
        runner_up,
        score,
    }
}

/// `clamp(max_k cos(F(i), T(k)), 0, 1)`, with 0 for a zero feature vector.
pub fn directional_reliability(f: &Matrix, t: &TokenBank) -> Result<Vec<f64>> {
    check_channels("directional_reliability", f, t)?;
    Ok(direction_parts(f, &row_l2_norms(f), t.tokens(), &row_l2_norms(t.tokens())).score)
}

/// `weight·l + (1 − weight)·d`, elementwise.
pub fn combine_reliability(l: &[f64], d: &[f64], weight: f64) -> Vec<f64> {
    l.iter()
        .zip(d)
        .map(|(l, d)| weight * l + (1.0 - weight) * d)
        .collect()
}

/// Intermediates of one token update.
#[derive(Clone, Debug)]
pub(crate) struct UpdateParts {
    /// `T Fᵀ / √C`, `K × N`, before modulation.
    pub logits: Matrix,
    /// Softmax over positions of the modulated logits.
    pub attention: Matrix,
    /// `A F`, `K × C`.
    pub aggregated: Matrix,
    pub mlp: MlpCache,
    pub next: Matrix,
}

fn modulated_attention(logits: &Matrix, r: &[f64]) -> Matrix {
    let mut modulated = logits.clone();
    for k in 0..modulated.rows() {
        for (v, rv) in modulated.row_mut(k).iter_mut().zip(r) {
            *v *= rv;
        }
    }
    softmax_rows(&modulated)
}

/// Per-token softmax over positions of `(T Fᵀ / √C) ⊙ R`, a `K × N` matrix.
pub fn reliability_attention(f: &Matrix, t: &TokenBank, r: &[f64]) -> Result<Matrix> {
    check_channels("reliability_attention", f, t)?;
    if r.len() != f.rows() {
        return Err(Error::contract(
            "reliability_attention",
            format!("{} reliabilities for {} positions", r.len(), f.rows()),
        ));
    }
    let logits = matmul_nt(t.tokens(), f).scale(1.0 / (f.cols() as f64).sqrt());
    Ok(modulated_attention(&logits, r))
}

pub(crate) fn update_parts(f: &Matrix, tokens: &Matrix, r: &[f64], mlp: &Mlp) -> UpdateParts {
    let scale = 1.0 / (f.cols() as f64).sqrt();
    let logits = matmul_nt(tokens, f).scale(scale);
    let attention = modulated_attention(&logits, r);
    let aggregated = matmul_unchecked(&attention, f);
    let (delta, cache) = mlp.forward_cached(&aggregated);
    let mut next = delta;
    next.add_scaled(tokens, 1.0);
    UpdateParts {
        logits,
        attention,
        aggregated,
        mlp: cache,
        next,
    }
}

/// Reliability-modulated attention aggregate, refined by the MLP and added
/// back to the tokens.
pub fn token_update(f: &Matrix, t: &TokenBank, r: &[f64], params: &DmqaParams) -> Result<TokenBank> {
    check_channels("token_update", f, t)?;
    if r.len() != f.rows() {
        return Err(Error::contract(
            "token_update",
            format!("{} reliabilities for {} positions", r.len(), f.rows()),
        ));
    }
    let parts = update_parts(f, t.tokens(), r, &params.mlp);
    TokenBank::with_iteration(parts.next, t.iteration + 1)
}

/// Everything computed while scoring one sample against one token state.
#[derive(Clone, Debug)]
pub(crate) struct ScoreParts {
    pub tokens: Matrix,
    pub token_norms: Vec<f64>,
    pub weights: Matrix,
    pub magnitude: MagnitudeParts,
    pub direction: DirectionParts,
}

pub(crate) fn score_parts(f: &Matrix, feature_norms: &[f64], tokens: &Matrix, epsilon: f64) -> ScoreParts {
    let token_norms = row_l2_norms(tokens);
    let weights = attention_weights(f, tokens);
    let magnitude = magnitude_parts(feature_norms, &token_norms, &weights, epsilon);
    let direction = direction_parts(f, feature_norms, tokens, &token_norms);
    ScoreParts {
        tokens: tokens.clone(),
        token_norms,
        weights,
        magnitude,
        direction,
    }
}

#[derive(Clone, Debug)]
pub(crate) struct IterationTape {
    pub scores: ScoreParts,
    pub combined: Vec<f64>,
    pub update: UpdateParts,
}

/// Full record of one sample's assessment, consumed by the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct SampleTape {
    pub feature_norms: Vec<f64>,
    pub iterations: Vec<IterationTape>,
    pub last: ScoreParts,
    pub combined: Vec<f64>,
}

/// Runs the iterative assessment on one sample.
pub(crate) fn assess_sample(f: &Matrix, tokens: &Matrix, params: &DmqaParams) -> Result<SampleTape> {
    let feature_norms = row_l2_norms(f);
    let alpha = params.alpha();
    let mut current = tokens.clone();
    let mut iterations = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let scores = score_parts(f, &feature_norms, &current, params.epsilon);
        let combined = combine_reliability(&scores.magnitude.score, &scores.direction.score, alpha);
        let update = update_parts(f, &current, &combined, &params.mlp);
        if !update.next.is_finite() {
            return Err(Error::NonFinite { op: "token_update" });
        }
        if let Some(k) = row_l2_norms(&update.next)
            .iter()
            .position(|n| *n < MIN_TOKEN_NORM)
        {
            return Err(Error::degenerate(
                "token_update",
                format!("token {k} collapsed to zero"),
            ));
        }
        current = update.next.clone();
        iterations.push(IterationTape {
            scores,
            combined,
            update,
        });
    }
    let last = score_parts(f, &feature_norms, &current, params.epsilon);
    let combined = combine_reliability(&last.magnitude.score, &last.direction.score, params.beta());
    if combined.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "dmqa_assess" });
    }
    Ok(SampleTape {
        feature_norms,
        iterations,
        last,
        combined,
    })
}

fn assess(f: &FeatureMap, t0: &TokenBank, params: &DmqaParams, traced: bool) -> Result<ReliabilityResult> {
    if f.channels() != t0.channels() {
        return Err(Error::contract(
            "dmqa_assess",
            format!("features have {} channels, tokens {}", f.channels(), t0.channels()),
        ));
    }
    params.validate(f.channels())?;
    let (b, n) = (f.samples(), f.positions());
    let mut result = ReliabilityResult {
        samples: b,
        positions: n,
        magnitude: Vec::with_capacity(b * n),
        direction: Vec::with_capacity(b * n),
        combined: Vec::with_capacity(b * n),
        final_tokens: Vec::with_capacity(b),
        trace: Vec::new(),
    };
    if traced {
        result.trace = (0..params.iterations)
            .map(|_| IterationScores {
                magnitude: Vec::with_capacity(b * n),
                direction: Vec::with_capacity(b * n),
            })
            .collect();
    }
    for s in 0..b {
        let tape = assess_sample(&f.sample(s), t0.tokens(), params)?;
        result.magnitude.extend_from_slice(&tape.last.magnitude.score);
        result.direction.extend_from_slice(&tape.last.direction.score);
        result.combined.extend_from_slice(&tape.combined);
        if traced {
            for (slot, it) in result.trace.iter_mut().zip(&tape.iterations) {
                slot.magnitude.extend_from_slice(&it.scores.magnitude.score);
                slot.direction.extend_from_slice(&it.scores.direction.score);
            }
        }
        result.final_tokens.push(TokenBank {
            tokens: tape.last.tokens,
            iteration: t0.iteration + params.iterations,
        });
    }
    Ok(result)
}

/// Iterative reliability assessment of every sample in `f`.
pub fn dmqa_assess(f: &FeatureMap, t0: &TokenBank, params: &DmqaParams) -> Result<ReliabilityResult> {
    assess(f, t0, params, false)
}

/// Same as [`dmqa_assess`], additionally recording the in-loop scores.
pub fn dmqa_assess_traced(f: &FeatureMap, t0: &TokenBank, params: &DmqaParams) -> Result<ReliabilityResult> {
    assess(f, t0, params, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn bank(rows: &[Vec<f64>]) -> TokenBank {
        TokenBank::new(m(rows)).unwrap()
    }

    fn random_features(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(n, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn attention_single_token_is_one() {
        let f = m(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        let w = token_attention(&f, &bank(&[vec![0.3, 0.4]])).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn attention_two_tokens_scalar_channel() {
        let w = token_attention(&m(&[vec![1.0]]), &bank(&[vec![1.0], vec![-1.0]])).unwrap();
        // softmax(1, −1) = (e/(e + 1/e), …)
        let e = 1f64.exp();
        let expected = e / (e + 1.0 / e);
        assert!((w[(0, 0)] - expected).abs() < 1e-15);
        assert!((w[(0, 0)] - 0.8808).abs() < 1e-4);
        assert!((w[(0, 1)] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn attention_zero_feature_is_uniform() {
        let w = token_attention(
            &m(&[vec![0.0, 0.0]]),
            &bank(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]),
        )
        .unwrap();
        for v in w.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rejects_channel_mismatch() {
        assert!(token_attention(&m(&[vec![1.0]]), &bank(&[vec![1.0, 0.0]])).is_err());
    }

    #[test]
    fn magnitude_zero_deviation_is_one() {
        // Two unit tokens, every feature has unit norm, so δ = 0 everywhere.
        let t = bank(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = m(&[vec![0.0, -1.0], vec![-1.0, 0.0], vec![0.0, 1.0]]);
        let w = token_attention(&f, &t).unwrap();
        let l = magnitude_reliability(&f, &t, &w, 1e-6).unwrap();
        assert!(l.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn magnitude_single_token_example() {
        let t = bank(&[vec![3.0, 4.0]]);
        let f = m(&[vec![3.0, 4.0], vec![0.0, 0.0]]);
        let w = token_attention(&f, &t).unwrap();
        let l = magnitude_reliability(&f, &t, &w, 1e-6).unwrap();
        // δ = (0, 5): L = (1, 1 − 5/(5 + 1e-6)).
        assert_eq!(l[0], 1.0);
        assert!((l[1] - (1.0 - 5.0 / (5.0 + 1e-6))).abs() < 1e-15);
        assert!(l[1] < 1e-6);
    }

    #[test]
    fn magnitude_single_position_collapses_towards_zero() {
        let t = bank(&[vec![1.0, 0.0]]);
        let f = m(&[vec![3.0, 0.0]]);
        let w = token_attention(&f, &t).unwrap();
        let l = magnitude_reliability(&f, &t, &w, 1e-6).unwrap();
        // δ = 2: L = 1 − 2/(2 + ε) = ε/(2 + ε).
        assert!((l[0] - 1e-6 / (2.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn direction_examples() {
        let t = bank(&[vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let f = m(&[
            vec![2.0, 4.0, 0.0],   // parallel to token 0
            vec![-2.0, 1.0, 0.0],  // orthogonal to both
            vec![0.0, 0.0, 0.0],   // zero vector
        ]);
        let d = directional_reliability(&f, &t).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);

        let anti = directional_reliability(&m(&[vec![-1.0, -2.0, 0.0]]), &bank(&[vec![1.0, 2.0, 0.0]]))
            .unwrap();
        assert_eq!(anti, vec![0.0]);
    }

    #[test]
    fn direction_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(6, 4, &mut rng);
        let t = TokenBank::random(5, 4, &mut rng).unwrap();
        let d = directional_reliability(&f, &t).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let ds = directional_reliability(&f.scale(c), &t).unwrap();
            for (a, b) in d.iter().zip(&ds) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_reliability(&[0.2], &[0.9], 1.0), vec![0.2]);
        assert_eq!(combine_reliability(&[0.2], &[0.9], 0.0), vec![0.9]);
        let r = combine_reliability(&[0.8], &[0.6], 0.5);
        assert!((r[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_output_layer_keeps_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DmqaParams::new(3, 2, &mut rng);
        let f = random_features(5, 3, &mut rng);
        let t = TokenBank::random(4, 3, &mut rng).unwrap();
        let next = token_update(&f, &t, &[0.3, 0.9, 0.1, 0.5, 1.0], &params).unwrap();
        assert_eq!(next.tokens(), t.tokens());
        assert_eq!(next.iteration(), 1);
    }

    #[test]
    fn zero_reliability_aggregates_column_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::init(3, 6, 3, 1.0, &mut rng);
        let f = random_features(4, 3, &mut rng);
        let t = TokenBank::random(2, 3, &mut rng).unwrap();
        let parts = update_parts(&f, t.tokens(), &[0.0; 4], &mlp);
        let means: Vec<f64> = (0..3).map(|c| f.column(c).iter().sum::<f64>() / 4.0).collect();
        for k in 0..2 {
            for v in parts.attention.row(k) {
                assert!((v - 0.25).abs() < 1e-15);
            }
            for (a, b) in parts.aggregated.row(k).iter().zip(&means) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_position_aggregates_that_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mlp = Mlp::init(3, 6, 3, 1.0, &mut rng);
        let f = random_features(1, 3, &mut rng);
        let t = TokenBank::random(3, 3, &mut rng).unwrap();
        let parts = update_parts(&f, t.tokens(), &[0.42], &mlp);
        for k in 0..3 {
            assert_eq!(parts.attention.row(k), &[1.0]);
            assert_eq!(parts.aggregated.row(k), f.row(0));
        }
    }

    fn feature_map(b: usize, n: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let values = (0..b * n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMap::new(b, n, c, values).unwrap()
    }

    #[test]
    fn beta_endpoint_returns_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = DmqaParams::new(4, 2, &mut rng);
        params.mlp = Mlp::init(4, 8, 4, 1.0, &mut rng);
        params.beta_raw = 20.0;
        let f = feature_map(2, 5, 4, &mut rng);
        let t = TokenBank::random(3, 4, &mut rng).unwrap();
        let r = dmqa_assess(&f, &t, &params).unwrap();
        for (rv, lv) in r.combined.iter().zip(&r.magnitude) {
            assert!((rv - lv).abs() < 1e-8);
        }
    }

    #[test]
    fn single_iteration_matches_composed_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = DmqaParams::new(4, 1, &mut rng);
        params.beta_raw = 0.7;
        params.alpha_raw = -0.4;
        let f = feature_map(1, 6, 4, &mut rng);
        let t = TokenBank::random(3, 4, &mut rng).unwrap();
        let r = dmqa_assess(&f, &t, &params).unwrap();

        let slice = f.sample(0);
        let w = token_attention(&slice, &t).unwrap();
        let l = magnitude_reliability(&slice, &t, &w, params.epsilon).unwrap();
        let d = directional_reliability(&slice, &t).unwrap();
        let expected = combine_reliability(&l, &d, params.beta());
        assert_eq!(r.combined, expected);
        assert_eq!(r.final_tokens[0].tokens(), t.tokens());
    }

    #[test]
    fn assessment_is_deterministic_and_traced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = DmqaParams::new(4, 3, &mut rng);
        params.mlp = Mlp::init(4, 8, 4, 0.5, &mut rng);
        let f = feature_map(3, 5, 4, &mut rng);
        let t = TokenBank::random(4, 4, &mut rng).unwrap();
        let a = dmqa_assess_traced(&f, &t, &params).unwrap();
        let b = dmqa_assess_traced(&f, &t, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 3);
        assert_eq!(a.trace[0].magnitude.len(), 15);
        assert_eq!(a.final_tokens[0].iteration(), 3);
        assert!(dmqa_assess(&f, &t, &params).unwrap().trace.is_empty());
    }

    #[test]
    fn token_bank_rejects_zero_rows() {
        let err = TokenBank::new(m(&[vec![1.0, 0.0], vec![0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput { .. }));
    }

    #[test]
    fn random_tokens_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = TokenBank::random(16, 16, &mut rng).unwrap();
        for n in row_l2_norms(t.tokens()) {
            assert!((n - 1.0).abs() < 1e-14);
        }
    }
}
