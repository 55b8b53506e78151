//! Scalar-loop forward pass, generic over the number type. Evaluated in
//! double-double it gives loss values whose differences stay accurate at
//! finite-difference step sizes.

use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::numerics::{Matrix, Real};

use super::model::{check_batch, Batch};
use super::{ParamSet, Variant};

type Rows<T> = Vec<Vec<T>>;

fn lift<T: Real>(m: &Matrix) -> Rows<T> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| T::from_f64(v)).collect()).collect()
}

fn c<T: Real>(x: f64) -> T {
    T::from_f64(x)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(c(0.0), |s, (&x, &y)| s + x * y)
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    let m = v.iter().copied().fold(v[0], T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let z = e.iter().fold(c(0.0), |s, &x| s + x);
    e.into_iter().map(|x| x / z).collect()
}

fn logistic<T: Real>(x: f64) -> T {
    c::<T>(1.0) / (c::<T>(1.0) + (-c::<T>(x)).exp())
}

fn mlp<T: Real>(m: &Mlp, x: &[T]) -> Vec<T> {
    let hidden: Vec<T> = (0..m.hidden_dim())
        .map(|h| {
            let pre = (0..x.len()).fold(c::<T>(m.b1[h]), |s, i| s + x[i] * c(m.w1[(i, h)]));
            pre.tanh()
        })
        .collect();
    (0..m.output_dim())
        .map(|o| (0..hidden.len()).fold(c::<T>(m.b2[o]), |s, h| s + hidden[h] * c(m.w2[(h, o)])))
        .collect()
}

/// `(L, D)` of features `f` against `tokens`.
fn score<T: Real>(f: &Rows<T>, fnorm: &[T], tokens: &Rows<T>, epsilon: f64) -> (Vec<T>, Vec<T>) {
    let root_c = c::<T>(f[0].len() as f64).sqrt();
    let tnorm: Vec<T> = tokens.iter().map(|t| norm(t)).collect();
    let dev: Vec<T> = f
        .iter()
        .zip(fnorm)
        .map(|(fi, &ni)| {
            let w = softmax(&tokens.iter().map(|t| dot(fi, t) / root_c).collect::<Vec<_>>());
            let expected = w.iter().zip(&tnorm).fold(c(0.0), |s, (&a, &b)| s + a * b);
            (ni - expected).abs()
        })
        .collect();
    let denom = dev.iter().copied().fold(c(0.0), T::max) + c(epsilon);
    let l = dev.iter().map(|&d| c::<T>(1.0) - d / denom).collect();
    let d = f
        .iter()
        .zip(fnorm)
        .map(|(fi, &ni)| {
            if ni == c(0.0) {
                return c(0.0);
            }
            let best = tokens
                .iter()
                .zip(&tnorm)
                .map(|(t, &nt)| dot(fi, t) / (ni * nt))
                .fold(c::<T>(f64::NEG_INFINITY), T::max);
            best.max(c(0.0)).min(c(1.0))
        })
        .collect();
    (l, d)
}

fn blend<T: Real>(l: &[T], d: &[T], w: T) -> Vec<T> {
    l.iter().zip(d).map(|(&a, &b)| w * a + (c::<T>(1.0) - w) * b).collect()
}

/// Final per-position reliability of one modality slice.
fn assess<T: Real>(params: &ParamSet, f: &Rows<T>, t0: &Matrix) -> Vec<T> {
    let p = &params.dmqa;
    let root_c = c::<T>(f[0].len() as f64).sqrt();
    let fnorm: Vec<T> = f.iter().map(|r| norm(r)).collect();
    let mut tokens = lift::<T>(t0);
    for _ in 0..p.iterations {
        let (l, d) = score(f, &fnorm, &tokens, p.epsilon);
        let r = blend(&l, &d, logistic(p.alpha_raw));
        tokens = tokens
            .iter()
            .map(|t| {
                let logits: Vec<T> = f.iter().zip(&r).map(|(fi, &ri)| dot(t, fi) / root_c * ri).collect();
                let a = softmax(&logits);
                let agg: Vec<T> = (0..t.len())
                    .map(|j| f.iter().zip(&a).fold(c(0.0), |s, (fi, &w)| s + w * fi[j]))
                    .collect();
                mlp(&p.mlp, &agg).into_iter().zip(t).map(|(o, &x)| o + x).collect()
            })
            .collect();
    }
    let (l, d) = score(f, &fnorm, &tokens, p.epsilon);
    blend(&l, &d, logistic(p.beta_raw))
}

struct Modality<T> {
    projected: Vec<T>,
    channel_reliability: Vec<T>,
}

fn modality<T: Real>(
    params: &ParamSet,
    variant: Variant,
    slice: &[f64],
    channels: usize,
    tokens: &Matrix,
    half: usize,
) -> Modality<T> {
    let f: Rows<T> = slice.chunks(channels).map(|r| r.iter().map(|&v| c(v)).collect()).collect();
    let n = c::<T>(f.len() as f64);
    let mean: Vec<T> = (0..channels)
        .map(|j| f.iter().fold(c::<T>(0.0), |s, r| s + r[j]) / n)
        .collect();
    let projected = if variant.uses_projector() {
        let q = params.projector.joint();
        let root_c = c::<T>(channels as f64).sqrt();
        (0..q.rows())
            .map(|i| (0..channels).fold(c(0.0), |s, j| s + c::<T>(q[(i, half * channels + j)]) / root_c * mean[j]))
            .collect()
    } else {
        let w = &params.lift;
        (0..w.rows())
            .map(|i| (0..channels).fold(c(0.0), |s, j| s + c::<T>(w[(i, j)]) * mean[j]))
            .collect()
    };
    let width = 2 * channels;
    let channel_reliability = if variant.uses_reliability() {
        let r = assess(params, &f, tokens);
        let pooled = r.iter().fold(c::<T>(0.0), |s, &x| s + x) / n;
        mlp(&params.fusion.mlp, &[pooled])
    } else {
        vec![c(0.0); width]
    };
    Modality {
        projected,
        channel_reliability,
    }
}

/// Mean probe cross-entropy, recomputed from scratch in `T`.
pub fn reference_loss<T: Real>(params: &ParamSet, variant: Variant, batch: &Batch) -> Result<T> {
    check_batch(params, batch)?;
    if batch.is_empty() {
        return Err(Error::contract("reference_loss", "empty batch"));
    }
    let channels = params.channels();
    let mut total = c::<T>(0.0);
    for b in 0..batch.len() {
        let opt = modality::<T>(
            params,
            variant,
            batch.optical.sample_slice(b),
            channels,
            params.tokens_r.tokens(),
            0,
        );
        let sar = modality::<T>(params, variant, batch.sar.sample_slice(b), channels, params.tokens_s.tokens(), 1);
        let probe = &params.probe;
        let mut logits: Vec<T> = probe.bias.iter().map(|&v| c(v)).collect();
        for ch in 0..opt.projected.len() {
            let g = softmax(&[opt.channel_reliability[ch], sar.channel_reliability[ch]]);
            let z = g[0] * opt.projected[ch] + g[1] * sar.projected[ch];
            for (k, l) in logits.iter_mut().enumerate() {
                *l = *l + z * c(probe.weights[(ch, k)]);
            }
        }
        let m = logits.iter().copied().fold(logits[0], T::max);
        let lse = m + logits.iter().fold(c::<T>(0.0), |s, &x| s + (x - m).exp()).ln();
        total = total + lse - logits[batch.labels[b]];
    }
    let value = total / c(batch.len() as f64);
    if !value.to_f64().is_finite() {
        return Err(Error::NonFinite { op: "reference_loss" });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graddiff::{random_case, CheckDims, Objective, ProbeCrossEntropy};
    use crate::numerics::Dd;

    #[test]
    fn matches_the_tape_forward() {
        for seed in 0..12 {
            let case = random_case(seed, CheckDims::random(seed)).unwrap();
            for variant in Variant::ALL {
                let fast = ProbeCrossEntropy::new(variant).value(&case.params, &case.batch).unwrap();
                let f = reference_loss::<f64>(&case.params, variant, &case.batch).unwrap();
                let dd = reference_loss::<Dd>(&case.params, variant, &case.batch).unwrap();
                assert!((fast - f).abs() <= 1e-12 * fast.abs().max(1.0), "{seed} {variant}: {fast} vs {f}");
                assert!((fast - dd.to_f64()).abs() <= 1e-12 * fast.abs().max(1.0), "{seed} {variant}");
            }
        }
    }
}
