//! Random modality-missing protocol.
//!
//! With two modalities and a per-sample drop probability `p` for each of them
//! (never both), a sample keeps `a = 1` modality with probability `2p` and
//! `a = 2` otherwise, so `E[a] = 2 − 2p` and the expected missing rate
//! `1 − E[a]/2` equals `p`. The sampler therefore uses `p = target_mr`, which
//! caps the target at `(M − 1)/M = 0.5`.
//!
//! Missing slices are either zero-filled or replaced by a degraded copy of the
//! clean slice, standing in for an imperfect reconstruction.
//!
//! Randomness is split per sample: every sample draws from its own ChaCha
//! stream, selected by the sample index, so results do not depend on the
//! processing order.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dmqa::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MODALITIES: usize = 2;
pub const MAX_MISSING_RATE: f64 = (MODALITIES as f64 - 1.0) / MODALITIES as f64;

/// The missing-rate grid 0.0, 0.1, …, 0.5.
pub const MR_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Optical,
    Sar,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Optical, Modality::Sar];

    pub fn index(self) -> usize {
        match self {
            Modality::Optical => 0,
            Modality::Sar => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Optical => "optical",
            Modality::Sar => "sar",
        }
    }
}

/// A seeded RNG on an independent stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Availability {
    pub optical: bool,
    pub sar: bool,
}

impl Availability {
    pub const COMPLETE: Availability = Availability {
        optical: true,
        sar: true,
    };

    pub fn count(self) -> usize {
        self.optical as usize + self.sar as usize
    }

    pub fn has(self, m: Modality) -> bool {
        match m {
            Modality::Optical => self.optical,
            Modality::Sar => self.sar,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvailabilitySchedule {
    pub entries: Vec<Availability>,
    pub seed: u64,
    pub target_mr: f64,
}

impl AvailabilitySchedule {
    /// Every sample keeps both modalities.
    pub fn complete(num_samples: usize) -> Self {
        Self {
            entries: vec![Availability::COMPLETE; num_samples],
            seed: 0,
            target_mr: 0.0,
        }
    }

    /// Builds a schedule from explicit entries, checking that no sample loses
    /// both modalities.
    pub fn from_entries(entries: Vec<Availability>, seed: u64, target_mr: f64) -> Result<Self> {
        if let Some(i) = entries.iter().position(|a| a.count() == 0) {
            return Err(Error::contract(
                "AvailabilitySchedule",
                format!("sample {i} has no available modality"),
            ));
        }
        Ok(Self {
            entries,
            seed,
            target_mr,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `sample_id,optical_available,sar_available` rows (1 or 0).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sample_id", "optical_available", "sar_available"])?;
        for (i, a) in self.entries.iter().enumerate() {
            w.write_record([
                i.to_string(),
                (a.optical as u8).to_string(),
                (a.sar as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for (row, record) in r.records().enumerate() {
            let record = record?;
            let flag = |idx: usize| -> Result<bool> {
                match record.get(idx) {
                    Some("1") => Ok(true),
                    Some("0") => Ok(false),
                    other => Err(Error::contract(
                        "AvailabilitySchedule::read_csv",
                        format!("row {row}: bad flag {other:?}"),
                    )),
                }
            };
            entries.push(Availability {
                optical: flag(1)?,
                sar: flag(2)?,
            });
        }
        let mr = measured_mr(&Self {
            entries: entries.clone(),
            seed: 0,
            target_mr: 0.0,
        })
        .unwrap_or(0.0);
        Self::from_entries(entries, 0, mr)
    }
}

/// Draws an availability schedule whose expected missing rate is `target_mr`.
pub fn sample_availability(num_samples: usize, target_mr: f64, seed: u64) -> Result<AvailabilitySchedule> {
    if !(target_mr >= 0.0) {
        return Err(Error::contract(
            "sample_availability",
            format!("missing rate {target_mr} must be non-negative"),
        ));
    }
    if target_mr > MAX_MISSING_RATE {
        return Err(Error::ProtocolBound {
            requested: target_mr,
            bound: MAX_MISSING_RATE,
        });
    }
    let p = target_mr;
    let entries = (0..num_samples)
        .map(|i| {
            let u: f64 = stream_rng(seed, i as u64).random();
            if u < p {
                Availability {
                    optical: false,
                    sar: true,
                }
            } else if u < 2.0 * p {
                Availability {
                    optical: true,
                    sar: false,
                }
            } else {
                Availability::COMPLETE
            }
        })
        .collect();
    Ok(AvailabilitySchedule {
        entries,
        seed,
        target_mr,
    })
}

/// `MR = 1 − Σ a_i / (L·M)`.
pub fn measured_mr(schedule: &AvailabilitySchedule) -> Result<f64> {
    if schedule.is_empty() {
        return Err(Error::contract("measured_mr", "empty schedule"));
    }
    let available: usize = schedule.entries.iter().map(|a| a.count()).sum();
    Ok(1.0 - available as f64 / (schedule.len() * MODALITIES) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    ZeroFill,
    GaussianNoise,
    PatchOcclusion,
}

/// How an unavailable modality is filled in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Noise standard deviation, or the occluded fraction of positions.
    pub severity: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn zero_fill() -> Self {
        Self {
            kind: DegradationKind::ZeroFill,
            severity: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(std: f64, seed: u64) -> Self {
        Self {
            kind: DegradationKind::GaussianNoise,
            severity: std,
            seed,
        }
    }

    pub fn occlusion(fraction: f64, seed: u64) -> Self {
        Self {
            kind: DegradationKind::PatchOcclusion,
            severity: fraction,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.severity >= 0.0) || !self.severity.is_finite() {
            return Err(Error::contract(
                "DegradationSpec",
                format!("severity {} must be finite and non-negative", self.severity),
            ));
        }
        if self.kind == DegradationKind::PatchOcclusion && self.severity > 1.0 {
            return Err(Error::contract(
                "DegradationSpec",
                format!("occlusion fraction {} exceeds 1", self.severity),
            ));
        }
        Ok(())
    }
}

/// `zero`, `noise:<std>` or `occlusion:<fraction>`; the seed is left at 0.
impl FromStr for DegradationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let severity = |arg: Option<&str>| -> Result<f64> {
            arg.ok_or_else(|| Error::Config(format!("policy `{s}` needs a severity")))?
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("policy `{s}`: {e}")))
        };
        let spec = match kind {
            "zero" | "zero_fill" => DegradationSpec::zero_fill(),
            "noise" | "gaussian" => DegradationSpec::gaussian(severity(arg)?, 0),
            "occlusion" | "patch" => DegradationSpec::occlusion(severity(arg)?, 0),
            _ => return Err(Error::Config(format!("unknown policy `{s}`"))),
        };
        spec.validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DegradationKind::ZeroFill => write!(f, "zero"),
            DegradationKind::GaussianNoise => write!(f, "noise:{}", self.severity),
            DegradationKind::PatchOcclusion => write!(f, "occlusion:{}", self.severity),
        }
    }
}

fn degrade_with<R: Rng>(f: &Matrix, kind: DegradationKind, severity: f64, rng: &mut R) -> Matrix {
    match kind {
        DegradationKind::ZeroFill => Matrix::zeros(f.rows(), f.cols()),
        DegradationKind::GaussianNoise => {
            if severity == 0.0 {
                return f.clone();
            }
            let normal = Normal::new(0.0, severity).expect("validated std");
            let mut out = f.clone();
            for v in out.data_mut() {
                *v += normal.sample(rng);
            }
            out
        }
        DegradationKind::PatchOcclusion => {
            let n = f.rows();
            let len = ((severity * n as f64).round() as usize).min(n);
            let mut out = f.clone();
            if len == 0 {
                return out;
            }
            let start = rng.random_range(0..=n - len);
            for i in start..start + len {
                out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
            out
        }
    }
}

/// Applies a degradation to one `positions × channels` slice.
pub fn degrade(f: &Matrix, spec: &DegradationSpec) -> Result<Matrix> {
    spec.validate()?;
    Ok(degrade_with(f, spec.kind, spec.severity, &mut stream_rng(spec.seed, 0)))
}

/// Degrades every sample of a feature map, each on its own stream.
pub fn degrade_map(f: &FeatureMap, spec: &DegradationSpec) -> Result<FeatureMap> {
    spec.validate()?;
    let mut out = f.clone();
    for b in 0..f.samples() {
        let mut rng = stream_rng(spec.seed, b as u64);
        let d = degrade_with(&f.sample(b), spec.kind, spec.severity, &mut rng);
        out.sample_slice_mut(b).copy_from_slice(d.data());
    }
    Ok(out)
}

/// Replaces unavailable modality slices according to `policy`.
pub fn apply_missing(
    f_r: &FeatureMap,
    f_s: &FeatureMap,
    schedule: &AvailabilitySchedule,
    policy: &DegradationSpec,
) -> Result<(FeatureMap, FeatureMap)> {
    policy.validate()?;
    if f_r.samples() != schedule.len() || f_s.samples() != schedule.len() {
        return Err(Error::contract(
            "apply_missing",
            format!(
                "schedule has {} entries, features have {} / {} samples",
                schedule.len(),
                f_r.samples(),
                f_s.samples()
            ),
        ));
    }
    let mut out_r = f_r.clone();
    let mut out_s = f_s.clone();
    for (b, a) in schedule.entries.iter().enumerate() {
        for m in Modality::ALL {
            if a.has(m) {
                continue;
            }
            let (src, dst) = match m {
                Modality::Optical => (f_r, &mut out_r),
                Modality::Sar => (f_s, &mut out_s),
            };
            let stream = (b * MODALITIES + m.index()) as u64;
            let mut rng = stream_rng(policy.seed, stream);
            let d = degrade_with(&src.sample(b), policy.kind, policy.severity, &mut rng);
            dst.sample_slice_mut(b).copy_from_slice(d.data());
        }
    }
    Ok((out_r, out_s))
}
