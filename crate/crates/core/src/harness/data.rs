//! Synthetic two-modality classification data.
//!
//! Each class owns a unit direction in channel space. The optical view of
//! class `c` carries direction `c` and the SAR view carries direction
//! `c + 1 (mod classes)`, so the same direction means different classes in
//! the two modalities. On top of that each view mixes in a code that is
//! only shared by pairs of classes: optical codes are indexed by `⌊c/2⌋`,
//! SAR codes by `c mod ⌈classes/2⌉`. Per position the class mean is scaled
//! by an amplitude in `[0.5, 1.5]` and isotropic view noise is added. A
//! corrupted slice draws the larger corruption noise instead.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dmqa::FeatureMap;
use crate::error::{Error, Result};
use crate::graddiff::Batch;
use crate::missing::stream_rng;
use crate::numerics::l2_norm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub positions: usize,
    pub channels: usize,
    /// Norm of every class mean.
    pub separation: f64,
    /// Per-channel noise standard deviation.
    pub view_noise: f64,
    /// Share of the class mean's energy in the pair-shared code.
    pub exclusive_fraction: f64,
    /// Probability that a modality slice is drawn with corruption noise.
    pub corruption_prob: f64,
    pub corruption_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.positions == 0 || self.channels == 0 {
            return Err(Error::Config("N and C must be at least 1".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be positive".into()));
        }
        for (name, v) in [
            ("exclusive_fraction", self.exclusive_fraction),
            ("corruption_prob", self.corruption_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("view_noise", self.view_noise),
            ("corruption_noise", self.corruption_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    /// Per-sample flags `[optical, sar]` marking corrupted slices.
    pub train_corrupted: Vec<[bool; 2]>,
    pub test_corrupted: Vec<[bool; 2]>,
}

fn unit_directions<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let n = l2_norm(&v);
            if n > 1e-6 {
                break v.iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

/// Class means per modality, `[optical, sar][class]`.
pub fn class_means(cfg: &SynthConfig) -> [Vec<Vec<f64>>; 2] {
    let n = cfg.num_classes;
    let half = n.div_ceil(2);
    let shared = unit_directions(n, cfg.channels, &mut stream_rng(cfg.seed, 1));
    let codes_r = unit_directions(half, cfg.channels, &mut stream_rng(cfg.seed, 2));
    let codes_s = unit_directions(half, cfg.channels, &mut stream_rng(cfg.seed, 3));
    let ws = (1.0 - cfg.exclusive_fraction).sqrt();
    let we = cfg.exclusive_fraction.sqrt();
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| ws * x + we * y).collect();
        let norm = l2_norm(&v).max(1e-12);
        v.iter().map(|x| cfg.separation * x / norm).collect()
    };
    let optical = (0..n).map(|c| mix(&shared[c], &codes_r[c / 2])).collect();
    let sar = (0..n).map(|c| mix(&shared[(c + 1) % n], &codes_s[c % half])).collect();
    [optical, sar]
}

fn render(
    cfg: &SynthConfig,
    means: &[Vec<Vec<f64>>; 2],
    count: usize,
    split: u64,
) -> Result<(Batch, Vec<[bool; 2]>)> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % cfg.num_classes).collect();
    labels.shuffle(&mut stream_rng(cfg.seed, 10 + split));
    let (n, c) = (cfg.positions, cfg.channels);
    let noise = Normal::new(0.0, cfg.view_noise).map_err(|e| Error::Config(e.to_string()))?;
    let junk = Normal::new(0.0, cfg.corruption_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut maps = [Vec::with_capacity(count * n * c), Vec::with_capacity(count * n * c)];
    let mut corrupted = Vec::with_capacity(count);
    for (b, &label) in labels.iter().enumerate() {
        let mut flags = [false; 2];
        for m in 0..2 {
            let stream = 1000 + split * 1_000_000_000 + (b * 2 + m) as u64;
            let mut rng = stream_rng(cfg.seed, stream);
            flags[m] = rng.random::<f64>() < cfg.corruption_prob;
            let mean = &means[m][label];
            let dist = if flags[m] { &junk } else { &noise };
            for _ in 0..n {
                let amp = rng.random_range(0.5..1.5);
                maps[m].extend(mean.iter().map(|mu| amp * mu + dist.sample(&mut rng)));
            }
        }
        corrupted.push(flags);
    }
    let [r, s] = maps;
    let batch = Batch::new(
        FeatureMap::new(count, n, c, r)?,
        FeatureMap::new(count, n, c, s)?,
        labels,
    )?;
    Ok((batch, corrupted))
}

/// Balanced, shuffled train and test splits.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let means = class_means(cfg);
    let (train, train_corrupted) = render(cfg, &means, cfg.n_train, 0)?;
    let (test, test_corrupted) = render(cfg, &means, cfg.n_test, 1)?;
    Ok(Dataset {
        train,
        test,
        train_corrupted,
        test_corrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            num_classes: 6,
            n_train: 120,
            n_test: 120,
            positions: 4,
            channels: 8,
            separation: 2.0,
            view_noise: 0.5,
            exclusive_fraction: 0.5,
            corruption_prob: 0.0,
            corruption_noise: 1.0,
            seed: 4,
        }
    }

    fn pooled(f: &FeatureMap, b: usize) -> Vec<f64> {
        let s = f.sample(b);
        (0..s.cols())
            .map(|j| (0..s.rows()).map(|i| s[(i, j)]).sum::<f64>() / s.rows() as f64)
            .collect()
    }

    /// Nearest class centroid accuracy on one modality, fit on train and
    /// scored on test.
    fn centroid_accuracy(data: &Dataset, classes: usize, optical: bool) -> f64 {
        let pick = |b: &Batch| if optical { b.optical.clone() } else { b.sar.clone() };
        let (train, test) = (pick(&data.train), pick(&data.test));
        let c = train.channels();
        let mut sums = vec![vec![0.0; c]; classes];
        let mut counts = vec![0usize; classes];
        for (b, &l) in data.train.labels.iter().enumerate() {
            for (s, v) in sums[l].iter_mut().zip(pooled(&train, b)) {
                *s += v;
            }
            counts[l] += 1;
        }
        for (s, n) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let mut hits = 0;
        for (b, &l) in data.test.labels.iter().enumerate() {
            let x = pooled(&test, b);
            let dist = |m: &Vec<f64>| m.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes)
                .min_by(|&i, &j| dist(&sums[i]).total_cmp(&dist(&sums[j])))
                .unwrap();
            hits += usize::from(best == l);
        }
        hits as f64 / data.test.labels.len() as f64
    }

    #[test]
    fn separable_limit_is_perfect_on_each_modality() {
        let mut c = cfg();
        c.separation = 100.0;
        c.view_noise = 0.0;
        let data = gen_dataset(&c).unwrap();
        assert_eq!(centroid_accuracy(&data, 6, true), 1.0);
        assert_eq!(centroid_accuracy(&data, 6, false), 1.0);
    }

    #[test]
    fn exclusive_codes_leave_pairs_ambiguous() {
        let mut c = cfg();
        c.separation = 100.0;
        c.view_noise = 0.0;
        c.exclusive_fraction = 1.0;
        let data = gen_dataset(&c).unwrap();
        // Optical codes merge classes {0,1}, {2,3}, {4,5}; the best a single
        // modality can do is pick one class of each pair.
        for optical in [true, false] {
            let acc = centroid_accuracy(&data, 6, optical);
            assert!(acc <= 0.6, "optical={optical}: {acc}");
        }
    }

    #[test]
    fn modalities_disagree_on_shared_direction() {
        let mut c = cfg();
        c.exclusive_fraction = 0.0;
        let [r, s] = class_means(&c);
        for k in 0..6 {
            let same: f64 = r[(k + 1) % 6].iter().zip(&s[k]).map(|(a, b)| a * b).sum();
            assert!((same - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_are_balanced() {
        let data = gen_dataset(&cfg()).unwrap();
        let mut counts = [0; 6];
        for &l in &data.train.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [20; 6]);
    }

    #[test]
    fn corruption_rate_and_spread() {
        let mut c = cfg();
        c.corruption_prob = 0.25;
        c.corruption_noise = 3.0;
        c.n_train = 2000;
        let data = gen_dataset(&c).unwrap();
        let hits = data.train_corrupted.iter().flatten().filter(|f| **f).count();
        let rate = hits as f64 / 4000.0;
        assert!((rate - 0.25).abs() < 0.03, "{rate}");
        // Residual variance around the scaled mean: view_noise² when clean,
        // corruption_noise² when corrupted, plus the amplitude term.
        let means = class_means(&c);
        let mut var = [Mean::default(), Mean::default()];
        for (b, flags) in data.train_corrupted.iter().enumerate() {
            let s = data.train.optical.sample(b);
            let mu = &means[0][data.train.labels[b]];
            for i in 0..s.rows() {
                for (j, m) in mu.iter().enumerate() {
                    var[usize::from(flags[0])].push(s[(i, j)] - m);
                }
            }
        }
        // Amplitude adds Var(amp)·μ² = (1/12)·separation²/C per channel.
        let amp = 4.0 / 12.0 / 8.0;
        let clean = var[0].sq / var[0].n as f64;
        let noisy = var[1].sq / var[1].n as f64;
        assert!((clean - (0.25 + amp)).abs() < 0.02, "{clean}");
        assert!((noisy - (9.0 + amp)).abs() < 0.3, "{noisy}");
    }

    #[derive(Default)]
    struct Mean {
        sq: f64,
        n: usize,
    }

    impl Mean {
        fn push(&mut self, v: f64) {
            self.sq += v * v;
            self.n += 1;
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_dataset(&cfg()).unwrap();
        let b = gen_dataset(&cfg()).unwrap();
        let bits = |d: &Dataset| -> Vec<u64> { d.train.optical.values().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        let mut other = cfg();
        other.seed = 5;
        assert_ne!(gen_dataset(&other).unwrap().train.optical, a.train.optical);
    }
}
