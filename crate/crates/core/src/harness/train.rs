//! Training loop and evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dmqa::FeatureMap;
use crate::error::{Error, Result};
use crate::graddiff::{epoch_order, sample_outputs, sgd_step, Batch, Objective, ParamSet, ProbeCrossEntropy, Variant};
use crate::missing::{apply_missing, degrade_map, sample_availability, stream_rng, AvailabilitySchedule, DegradationSpec, Modality};

use super::config::ExperimentConfig;

const SCHEDULE_TAG: u64 = 0x5C4E_0000;
const POLICY_TAG: u64 = 0x9011_0000;
const TEST_TAG: u64 = 0x7E57;

/// Derives an independent seed for a tagged purpose.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    stream_rng(seed, tag).random()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub variant: Variant,
    pub mr: f64,
    pub policy: DegradationSpec,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSpec {
    pub fn new(cfg: &ExperimentConfig, variant: Variant, mr: f64, policy: DegradationSpec, seed: u64) -> Self {
        Self {
            variant,
            mr,
            policy,
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ParamSet,
    /// Loss of the initial parameters on the first epoch's inputs.
    pub initial_loss: Option<f64>,
    /// Mean minibatch loss per epoch.
    pub history: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().copied()
    }
}

/// Training inputs of one epoch, after the missing protocol is applied.
pub fn epoch_inputs(data: &Batch, spec: &TrainSpec, epoch: usize) -> Result<Batch> {
    let schedule = sample_availability(data.len(), spec.mr, derive_seed(spec.seed, SCHEDULE_TAG + epoch as u64))?;
    let policy = spec.policy.with_seed(derive_seed(spec.seed, POLICY_TAG + epoch as u64));
    let (optical, sar) = apply_missing(&data.optical, &data.sar, &schedule, &policy)?;
    Batch::new(optical, sar, data.labels.clone())
}

fn diverged(step: usize, loss: f64) -> Error {
    Error::Divergence { step, loss }
}

/// Minibatch gradient descent on the probe cross-entropy. The availability
/// schedule and shuffling are redrawn every epoch from `spec.seed`.
pub fn train(cfg: &ExperimentConfig, data: &Batch, spec: &TrainSpec) -> Result<TrainOutcome> {
    cfg.validate()?;
    if spec.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut params = ParamSet::init(&cfg.model(), spec.seed)?;
    let objective = ProbeCrossEntropy::new(spec.variant);
    let mut history = Vec::with_capacity(spec.epochs);
    let mut initial_loss = None;
    let mut step = 0;
    for epoch in 0..spec.epochs {
        let inputs = epoch_inputs(data, spec, epoch)?;
        if epoch == 0 {
            initial_loss = Some(objective.value(&params, &inputs).map_err(|_| diverged(0, f64::NAN))?);
        }
        let order = epoch_order(inputs.len(), spec.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(spec.batch_size) {
            let batch = inputs.select(chunk);
            let (loss, grads) = match objective.value_and_grad(&params, &batch) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(diverged(step, f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(step, loss));
            }
            params = match sgd_step(&params, &grads, spec.lr) {
                Ok(p) => p,
                Err(Error::NonFinite { .. }) => return Err(diverged(step, loss)),
                Err(e) => return Err(e),
            };
            total += loss;
            batches += 1;
            step += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(TrainOutcome {
        params,
        initial_loss,
        history,
    })
}

/// Test metrics. Reliability means are `None` for variants without
/// reliability assessment or when no sample falls in the split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub mean_r_clean_opt: Option<f64>,
    pub mean_r_clean_sar: Option<f64>,
    pub mean_r_missing_opt: Option<f64>,
    pub mean_r_missing_sar: Option<f64>,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Accuracy and loss on `batch` after applying `schedule` with `policy`,
/// plus mean reliability per modality split by availability.
pub fn evaluate(
    params: &ParamSet,
    variant: Variant,
    batch: &Batch,
    schedule: &AvailabilitySchedule,
    policy: &DegradationSpec,
) -> Result<Metrics> {
    if batch.is_empty() {
        return Err(Error::contract("evaluate", "empty batch"));
    }
    let (optical, sar) = apply_missing(&batch.optical, &batch.sar, schedule, policy)?;
    let inputs = Batch::new(optical, sar, batch.labels.clone())?;
    let outputs = sample_outputs(params, variant, &inputs)?;
    let mut hits = 0;
    let mut loss = 0.0;
    // [modality][available]
    let mut means: [[Mean; 2]; 2] = Default::default();
    for ((out, &label), avail) in outputs.iter().zip(&inputs.labels).zip(&schedule.entries) {
        let mut probs = out.logits.clone();
        crate::numerics::softmax_in_place(&mut probs);
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
        let best = (0..probs.len())
            .fold(0, |best, k| if out.logits[k] > out.logits[best] { k } else { best });
        hits += usize::from(best == label);
        for m in Modality::ALL {
            let scores = match m {
                Modality::Optical => &out.optical,
                Modality::Sar => &out.sar,
            };
            if let Some([_, _, r]) = scores {
                means[m.index()][usize::from(avail.has(m))].push(mean(r));
            }
        }
    }
    let n = outputs.len() as f64;
    Ok(Metrics {
        accuracy: hits as f64 / n,
        loss: loss / n,
        mean_r_clean_opt: means[0][1].get(),
        mean_r_clean_sar: means[1][1].get(),
        mean_r_missing_opt: means[0][0].get(),
        mean_r_missing_sar: means[1][0].get(),
    })
}

/// The test schedule of a run.
pub fn test_schedule(num_samples: usize, mr: f64, seed: u64) -> Result<AvailabilitySchedule> {
    sample_availability(num_samples, mr, derive_seed(seed, TEST_TAG))
}

/// Test-time policy of a run.
pub fn test_policy(policy: &DegradationSpec, seed: u64) -> DegradationSpec {
    policy.with_seed(derive_seed(seed, TEST_TAG + 1))
}

/// Mean final reliability per modality, over every sample and position.
pub fn mean_reliability(params: &ParamSet, optical: &FeatureMap, sar: &FeatureMap) -> Result<[f64; 2]> {
    let labels = vec![0; optical.samples()];
    let batch = Batch::new(optical.clone(), sar.clone(), labels)?;
    let outputs = sample_outputs(params, Variant::Full, &batch)?;
    let mut sums = [0.0; 2];
    for out in &outputs {
        for (s, scores) in sums.iter_mut().zip([&out.optical, &out.sar]) {
            let [_, _, r] = scores.as_ref().expect("full variant scores reliability");
            *s += mean(r);
        }
    }
    Ok(sums.map(|s| s / outputs.len() as f64))
}

/// Mean reliability, averaged over both modalities, on clean features and
/// on the same features degraded by `spec`.
pub fn reliability_gap(params: &ParamSet, batch: &Batch, spec: &DegradationSpec) -> Result<(f64, f64)> {
    let clean = mean_reliability(params, &batch.optical, &batch.sar)?;
    let noisy_r = degrade_map(&batch.optical, spec)?;
    let noisy_s = degrade_map(&batch.sar, &spec.with_seed(spec.seed.wrapping_add(1)))?;
    let degraded = mean_reliability(params, &noisy_r, &noisy_s)?;
    Ok((mean(&clean), mean(&degraded)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::gen_dataset;
    use crate::missing::Availability;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            num_classes: 3,
            n_train: 48,
            n_test: 24,
            positions: 4,
            channels: 3,
            tokens: 3,
            iterations: 1,
            epochs: 6,
            lr: 0.3,
            batch_size: 8,
            ..ExperimentConfig::default()
        }
    }

    fn spec(c: &ExperimentConfig, variant: Variant) -> TrainSpec {
        TrainSpec::new(c, variant, 0.0, DegradationSpec::zero_fill(), 2)
    }

    #[test]
    fn zero_epochs_keeps_the_initialization() {
        let c = ExperimentConfig { epochs: 0, ..cfg() };
        let data = gen_dataset(&c.synth()).unwrap();
        let out = train(&c, &data.train, &spec(&c, Variant::Full)).unwrap();
        assert_eq!(out.params, ParamSet::init(&c.model(), 2).unwrap());
        assert!(out.history.is_empty());
        assert_eq!(out.initial_loss, None);
    }

    #[test]
    fn loss_decreases_and_runs_repeat() {
        let c = cfg();
        let data = gen_dataset(&c.synth()).unwrap();
        for variant in Variant::ALL {
            let s = spec(&c, variant);
            let a = train(&c, &data.train, &s).unwrap();
            let b = train(&c, &data.train, &s).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.history.len(), 6);
            assert!(a.final_loss().unwrap() < a.initial_loss.unwrap(), "{variant}: {:?}", a.history);
        }
    }

    #[test]
    fn zero_batch_size_is_config_error() {
        let c = cfg();
        let data = gen_dataset(&c.synth()).unwrap();
        let s = TrainSpec { batch_size: 0, ..spec(&c, Variant::Full) };
        assert!(matches!(train(&c, &data.train, &s), Err(Error::Config(_))));
    }

    #[test]
    fn untrained_probe_sits_at_chance() {
        let c = cfg();
        let data = gen_dataset(&c.synth()).unwrap();
        let mut params = ParamSet::init(&c.model(), 0).unwrap();
        params.probe.weights = crate::numerics::Matrix::zeros(6, 3);
        let m = evaluate(
            &params,
            Variant::MeanBaseline,
            &data.test,
            &AvailabilitySchedule::complete(24),
            &DegradationSpec::zero_fill(),
        )
        .unwrap();
        // A zero probe gives uniform probabilities, and ties resolve to class 0.
        assert!((m.loss - 3f64.ln()).abs() < 1e-12);
        let zeros = data.test.labels.iter().filter(|&&l| l == 0).count();
        assert_eq!(m.accuracy, zeros as f64 / 24.0);
        assert_eq!(m.mean_r_clean_opt, None);
    }

    #[test]
    fn zero_rate_schedule_matches_complete_inputs() {
        let c = cfg();
        let data = gen_dataset(&c.synth()).unwrap();
        let params = ParamSet::init(&c.model(), 1).unwrap();
        let policy = DegradationSpec::zero_fill();
        let sched = test_schedule(24, 0.0, 1).unwrap();
        let a = evaluate(&params, Variant::Full, &data.test, &sched, &policy).unwrap();
        let b = evaluate(&params, Variant::Full, &data.test, &AvailabilitySchedule::complete(24), &policy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mean_r_missing_opt, None);
        assert_eq!(a.mean_r_missing_sar, None);
    }

    #[test]
    fn hand_built_schedule_splits_reliability() {
        let c = ExperimentConfig { n_test: 3, ..cfg() };
        let data = gen_dataset(&c.synth()).unwrap();
        let params = ParamSet::init(&c.model(), 1).unwrap();
        let entries = vec![
            Availability::COMPLETE,
            Availability { optical: false, sar: true },
            Availability { optical: true, sar: false },
        ];
        let sched = AvailabilitySchedule::from_entries(entries, 0, 1.0 / 3.0).unwrap();
        let policy = DegradationSpec::zero_fill();
        let m = evaluate(&params, Variant::Full, &data.test, &sched, &policy).unwrap();
        let (optical, sar) = apply_missing(&data.test.optical, &data.test.sar, &sched, &policy).unwrap();
        let inputs = Batch::new(optical, sar, data.test.labels.clone()).unwrap();
        let out = sample_outputs(&params, Variant::Full, &inputs).unwrap();
        let r = |b: usize, optical: bool| {
            let s = if optical { &out[b].optical } else { &out[b].sar };
            mean(&s.as_ref().unwrap()[2])
        };
        assert_eq!(m.mean_r_missing_opt, Some(r(1, true)));
        assert_eq!(m.mean_r_missing_sar, Some(r(2, false)));
        assert!((m.mean_r_clean_opt.unwrap() - (r(0, true) + r(2, true)) / 2.0).abs() < 1e-15);
        assert!((m.mean_r_clean_sar.unwrap() - (r(0, false) + r(1, false)) / 2.0).abs() < 1e-15);
        // A zero-filled slice has zero direction score and lower reliability.
        assert!(m.mean_r_missing_opt.unwrap() < m.mean_r_clean_opt.unwrap());
    }
}
