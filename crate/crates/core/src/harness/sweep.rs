//! Cartesian sweeps over missing rates, fill policies, variants and seeds.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graddiff::Variant;
use crate::missing::{DegradationSpec, MAX_MISSING_RATE};

use super::config::ExperimentConfig;
use super::data::{gen_dataset, Dataset};
use super::train::{evaluate, test_policy, test_schedule, train, Metrics, TrainSpec};

pub const CSV_HEADER: [&str; 10] = [
    "variant",
    "policy",
    "mr",
    "seed",
    "accuracy",
    "mean_R_clean_opt",
    "mean_R_clean_sar",
    "mean_R_missing_opt",
    "mean_R_missing_sar",
    "final_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub mrs: Vec<f64>,
    pub policies: Vec<DegradationSpec>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.mrs.is_empty() || self.policies.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("every sweep grid must be non-empty".into()));
        }
        for &mr in &self.mrs {
            if !(0.0..=MAX_MISSING_RATE).contains(&mr) {
                return Err(Error::ProtocolBound {
                    requested: mr,
                    bound: MAX_MISSING_RATE,
                });
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.mrs.len() * self.policies.len() * self.variants.len() * self.seeds.len()
    }
}

/// One trained and evaluated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub policy: String,
    pub mr: f64,
    pub seed: u64,
    pub metrics: Metrics,
    pub initial_loss: Option<f64>,
    pub history: Vec<f64>,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().copied()
    }

    fn key(&self) -> (Variant, &str, f64, u64) {
        (self.variant, &self.policy, self.mr, self.seed)
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub variant: Variant,
    pub policy: String,
    pub mr: f64,
    pub accuracy: Stat,
    pub mean_r_clean_opt: Option<Stat>,
    pub mean_r_clean_sar: Option<Stat>,
    pub mean_r_missing_opt: Option<Stat>,
    pub mean_r_missing_sar: Option<Stat>,
    pub final_loss: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub grid: SweepGrid,
    /// Sorted by `(variant, policy, mr, seed)`.
    pub runs: Vec<RunRecord>,
}

/// Trains and evaluates one cell on `data`. The test schedule and fill
/// noise depend only on `seed`, so every variant sees the same inputs.
pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variant: Variant,
    mr: f64,
    policy: DegradationSpec,
    seed: u64,
) -> Result<RunRecord> {
    let spec = TrainSpec::new(cfg, variant, mr, policy, seed);
    let outcome = train(cfg, &data.train, &spec)?;
    let schedule = test_schedule(data.test.len(), mr, seed)?;
    let metrics = evaluate(&outcome.params, variant, &data.test, &schedule, &test_policy(&policy, seed))?;
    Ok(RunRecord {
        variant,
        policy: policy.to_string(),
        mr,
        seed,
        metrics,
        initial_loss: outcome.initial_loss,
        history: outcome.history,
    })
}

/// Runs every cell of `grid` on the dataset of `cfg`.
pub fn sweep(cfg: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepResult> {
    sweep_with(cfg, grid, |_| {})
}

/// [`sweep`] with a callback after each finished run.
pub fn sweep_with(cfg: &ExperimentConfig, grid: &SweepGrid, mut progress: impl FnMut(&RunRecord)) -> Result<SweepResult> {
    cfg.validate()?;
    grid.validate()?;
    let data = gen_dataset(&cfg.synth())?;
    let mut runs = Vec::with_capacity(grid.cells());
    for &variant in &grid.variants {
        for policy in &grid.policies {
            for &mr in &grid.mrs {
                for &seed in &grid.seeds {
                    let record = run_cell(cfg, &data, variant, mr, *policy, seed)?;
                    progress(&record);
                    runs.push(record);
                }
            }
        }
    }
    runs.sort_by(|a, b| {
        let (ka, kb) = (a.key(), b.key());
        ka.0.cmp(&kb.0)
            .then_with(|| ka.1.cmp(kb.1))
            .then_with(|| ka.2.total_cmp(&kb.2))
            .then_with(|| ka.3.cmp(&kb.3))
    });
    Ok(SweepResult {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        grid: grid.clone(),
        runs,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for r in &self.runs {
            let m = &r.metrics;
            w.write_record([
                r.variant.name().to_string(),
                r.policy.clone(),
                r.mr.to_string(),
                r.seed.to_string(),
                m.accuracy.to_string(),
                cell(m.mean_r_clean_opt),
                cell(m.mean_r_clean_sar),
                cell(m.mean_r_missing_opt),
                cell(m.mean_r_missing_sar),
                cell(r.final_loss()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Per `(variant, policy, mr)` statistics over seeds, in key order.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut groups: BTreeMap<(Variant, String, u64), Vec<&RunRecord>> = BTreeMap::new();
        for r in &self.runs {
            // mr is non-negative, so its bit pattern orders like the value.
            groups.entry((r.variant, r.policy.clone(), r.mr.to_bits())).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((variant, policy, mr), runs)| {
                let stat = |f: &dyn Fn(&RunRecord) -> Option<f64>| {
                    Stat::of(&runs.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                };
                CellSummary {
                    variant,
                    policy,
                    mr: f64::from_bits(mr),
                    accuracy: stat(&|r| Some(r.metrics.accuracy)).expect("cells are non-empty"),
                    mean_r_clean_opt: stat(&|r| r.metrics.mean_r_clean_opt),
                    mean_r_clean_sar: stat(&|r| r.metrics.mean_r_clean_sar),
                    mean_r_missing_opt: stat(&|r| r.metrics.mean_r_missing_opt),
                    mean_r_missing_sar: stat(&|r| r.metrics.mean_r_missing_sar),
                    final_loss: stat(&|r| r.final_loss()),
                }
            })
            .collect()
    }

    /// Runs, histories and the per-cell summary as one JSON document.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            result: &'a SweepResult,
            summary: Vec<CellSummary>,
        }
        serde_json::to_string_pretty(&Doc {
            result: self,
            summary: self.summary(),
        })
        .expect("sweep result serializes")
    }

    /// Mean accuracy of one cell.
    pub fn mean_accuracy(&self, variant: Variant, policy: &str, mr: f64) -> Option<f64> {
        let acc: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant && r.policy == policy && r.mr == mr)
            .map(|r| r.metrics.accuracy)
            .collect();
        Stat::of(&acc).map(|s| s.mean)
    }
}

/// Parses `start:stop:step` (inclusive) or a comma list. Values are rounded
/// to twelve decimals so that `0.0:0.5:0.1` yields `0.3`, not
/// `0.30000000000000004`.
pub fn parse_mr_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::Config(format!("mr grid `{text}`: {why}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(&e.to_string()));
    let round = |x: f64| (x * 1e12).round() / 1e12;
    let parts: Vec<&str> = text.split(':').collect();
    let values = match parts.as_slice() {
        [single] => single.split(',').map(num).collect::<Result<Vec<_>>>()?,
        [start, stop, step] => {
            let (a, b, s) = (num(start)?, num(stop)?, num(step)?);
            if !(s > 0.0) || b < a {
                return Err(bad("need step > 0 and stop ≥ start"));
            }
            let count = ((b - a) / s + 1e-9).floor() as usize + 1;
            (0..count).map(|i| round(a + i as f64 * s)).collect()
        }
        _ => return Err(bad("expected start:stop:step or a comma list")),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    Ok(values)
}

/// Parses `a..b` (inclusive) or a comma list of seeds.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = |why: String| Error::Config(format!("seeds `{text}`: {why}"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|e| bad(e.to_string()));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if b < a {
            return Err(bad("empty range".into()));
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(num).collect()
}

/// Parses a comma list with `parse`.
pub fn parse_list<T>(text: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    text.split(',').map(|s| parse(s.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            num_classes: 3,
            n_train: 24,
            n_test: 18,
            positions: 3,
            channels: 3,
            tokens: 2,
            iterations: 1,
            epochs: 2,
            lr: 0.1,
            batch_size: 8,
            ..ExperimentConfig::default()
        }
    }

    fn grid() -> SweepGrid {
        SweepGrid {
            mrs: vec![0.0, 0.2],
            policies: vec![DegradationSpec::zero_fill(), "noise:1".parse().unwrap()],
            variants: vec![Variant::Full, Variant::MeanBaseline],
            seeds: vec![1, 0],
        }
    }

    #[test]
    fn mr_grid_parsing() {
        assert_eq!(parse_mr_grid("0.0:0.5:0.1").unwrap(), vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(parse_mr_grid("0.3").unwrap(), vec![0.3]);
        assert_eq!(parse_mr_grid("0,0.25").unwrap(), vec![0.0, 0.25]);
        assert!(parse_mr_grid("0:1").is_err());
        assert!(parse_mr_grid("0.5:0.0:0.1").is_err());
        assert!(parse_mr_grid("x").is_err());
    }

    #[test]
    fn seed_parsing() {
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_seeds("7,1").unwrap(), vec![7, 1]);
        assert!(parse_seeds("4..0").is_err());
    }

    #[test]
    fn row_count_is_grid_product() {
        let result = sweep(&tiny(), &grid()).unwrap();
        assert_eq!(result.runs.len(), 16);
        let csv = result.csv_string().unwrap();
        assert_eq!(csv.lines().count(), 17);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(result.summary().len(), 8);
        assert!(result.summary().iter().all(|c| c.accuracy.count == 2));
    }

    #[test]
    fn rows_sorted_by_key() {
        let result = sweep(&tiny(), &grid()).unwrap();
        let keys: Vec<_> = result.runs.iter().map(|r| (r.variant, r.policy.clone(), r.mr.to_bits(), r.seed)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(result.runs[0].variant, Variant::MeanBaseline);
    }

    #[test]
    fn undefined_reliability_is_empty_cell() {
        let result = sweep(&tiny(), &grid()).unwrap();
        let csv = result.csv_string().unwrap();
        let baseline = csv.lines().find(|l| l.starts_with("mean_baseline,zero,0,")).unwrap();
        let cells: Vec<&str> = baseline.split(',').collect();
        assert_eq!(&cells[5..9], &["", "", "", ""]);
        let full = csv.lines().find(|l| l.starts_with("full,zero,0.2,")).unwrap();
        assert!(full.split(',').all(|c| !c.is_empty()));
        let full_clean = csv.lines().find(|l| l.starts_with("full,zero,0,")).unwrap();
        let cells: Vec<&str> = full_clean.split(',').collect();
        // No slice is missing at mr = 0.
        assert_eq!(&cells[7..9], &["", ""]);
    }

    #[test]
    fn single_cell_equals_direct_call() {
        let cfg = tiny();
        let g = SweepGrid {
            mrs: vec![0.2],
            policies: vec![DegradationSpec::zero_fill()],
            variants: vec![Variant::Full],
            seeds: vec![3],
        };
        let result = sweep(&cfg, &g).unwrap();
        let data = gen_dataset(&cfg.synth()).unwrap();
        let spec = TrainSpec::new(&cfg, Variant::Full, 0.2, DegradationSpec::zero_fill(), 3);
        let outcome = train(&cfg, &data.train, &spec).unwrap();
        let schedule = test_schedule(cfg.n_test, 0.2, 3).unwrap();
        let metrics = evaluate(
            &outcome.params,
            Variant::Full,
            &data.test,
            &schedule,
            &test_policy(&DegradationSpec::zero_fill(), 3),
        )
        .unwrap();
        assert_eq!(result.runs[0].metrics, metrics);
        assert_eq!(result.runs[0].history, outcome.history);
    }

    #[test]
    fn byte_identical_reruns() {
        let a = sweep(&tiny(), &grid()).unwrap().csv_string().unwrap();
        let b = sweep(&tiny(), &grid()).unwrap().csv_string().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_grids() {
        let mut g = grid();
        g.seeds.clear();
        assert!(matches!(sweep(&tiny(), &g), Err(Error::Config(_))));
        let mut g = grid();
        g.mrs.push(0.6);
        assert!(matches!(sweep(&tiny(), &g), Err(Error::ProtocolBound { .. })));
    }

    #[test]
    fn stat_mean_and_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn json_has_summary_and_hash() {
        let result = sweep(&tiny(), &grid()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&result.to_json()).unwrap();
        assert_eq!(v["config_hash"], tiny().hash());
        assert_eq!(v["summary"].as_array().unwrap().len(), 8);
        assert_eq!(v["runs"][0]["history"].as_array().unwrap().len(), 2);
    }
}
