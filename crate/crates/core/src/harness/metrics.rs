//! Flowtime increase, success rate, batch evaluation and failure scenarios.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{run_episode, EpisodeResult, Policy};
use super::scenario::Instance;
use crate::error::{Error, Result};

/// A run counts as successful when it solves within this multiple of the
/// expert horizon.
pub const SUCCESS_FACTOR: usize = 3;

/// `(F − F*) / F*`.
pub fn flowtime_increase(f: usize, f_star: usize) -> Result<f64> {
    if f_star == 0 {
        return Err(Error::Config("flowtime increase is undefined for an expert horizon of 0".into()));
    }
    Ok((f as f64 - f_star as f64) / f_star as f64)
}

/// Fraction of `(F, F*, solved)` triples with `solved ∧ F ≤ 3F*`; 0 for an
/// empty list.
pub fn success_rate(results: &[(usize, usize, bool)]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let ok = results.iter().filter(|&&(f, f_star, solved)| solved && f <= SUCCESS_FACTOR * f_star).count();
    ok as f64 / results.len() as f64
}

/// Default cap for non-expert runs: anything longer cannot count.
pub fn default_cap(f_star: usize) -> usize {
    SUCCESS_FACTOR * f_star + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance: usize,
    pub seed: u64,
    pub f_star: usize,
    pub horizon: usize,
    pub solved: bool,
    pub success: bool,
    pub flowtime_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    /// Mean over the evaluated instances.
    pub flowtime_increase: f64,
    pub success_rate: f64,
    pub records: Vec<InstanceRecord>,
    /// Instances without a usable expert horizon.
    pub dropped: Vec<usize>,
}

impl MetricsReport {
    fn from_records(policy: &str, records: Vec<InstanceRecord>, dropped: Vec<usize>) -> Self {
        let n = records.len().max(1) as f64;
        let flowtime_increase = records.iter().map(|r| r.flowtime_increase).sum::<f64>() / n;
        let triples: Vec<_> = records.iter().map(|r| (r.horizon, r.f_star, r.solved)).collect();
        MetricsReport { policy: policy.to_string(), flowtime_increase, success_rate: success_rate(&triples), records, dropped }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-instance rows.
    pub fn write_csv<W: Write>(reports: &[MetricsReport], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["policy", "instance", "seed", "f_star", "horizon", "solved", "success", "flowtime_increase"])?;
        for rep in reports {
            for r in &rep.records {
                out.write_record([
                    rep.policy.clone(),
                    r.instance.to_string(),
                    r.seed.to_string(),
                    r.f_star.to_string(),
                    r.horizon.to_string(),
                    r.solved.to_string(),
                    r.success.to_string(),
                    format!("{:e}", r.flowtime_increase),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Episode seed for instance `index`.
fn episode_seed(instance: &Instance) -> u64 {
    instance.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

/// Runs the expert on every instance for `F*`, then every policy with a cap
/// of `3F* + 1`. Instances where the expert fails (or starts solved) are
/// dropped from all reports.
pub fn batch_evaluate(instances: &[Instance], policies: &[Policy]) -> Result<Vec<MetricsReport>> {
    let f_stars: Vec<Option<usize>> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            match run_episode(inst, &Policy::Expert, episode_seed(inst), inst.config.horizon_cap) {
                Ok(r) if r.success && r.horizon > 0 => Some(r.horizon),
                Ok(r) => {
                    log::info!("instance {idx} dropped: expert horizon {} success {}", r.horizon, r.success);
                    None
                }
                Err(e) => {
                    log::info!("instance {idx} dropped: {e}");
                    None
                }
            }
        })
        .collect();
    let dropped: Vec<usize> = f_stars.iter().enumerate().filter(|(_, f)| f.is_none()).map(|(i, _)| i).collect();

    policies
        .iter()
        .map(|policy| {
            let records = instances
                .par_iter()
                .zip(&f_stars)
                .enumerate()
                .filter_map(|(idx, (inst, f))| f.map(|f| (idx, inst, f)))
                .map(|(idx, inst, f_star)| {
                    let seed = episode_seed(inst);
                    let r = run_episode(inst, policy, seed, default_cap(f_star))?;
                    Ok(InstanceRecord {
                        instance: idx,
                        seed,
                        f_star,
                        horizon: r.horizon,
                        solved: r.success,
                        success: r.success && r.horizon <= SUCCESS_FACTOR * f_star,
                        flowtime_increase: flowtime_increase(r.horizon, f_star)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricsReport::from_records(policy.name(), records, dropped.clone()))
        })
        .collect()
}

/// Episode under link failures: range-limited graph, Poisson link drops
/// every step and the loss of a random robot at `t_fail`.
pub fn robustness_scenario(
    instance: &Instance,
    policy: &Policy,
    t_fail: usize,
    lambda: f64,
    r_com: Option<f64>,
    seed: u64,
) -> Result<EpisodeResult> {
    let mut inst = instance.clone();
    inst.config.fail_time = Some(t_fail);
    inst.config.edge_drop_lambda = lambda;
    inst.config.r_com = r_com;
    inst.config.validate()?;
    run_episode(&inst, policy, seed, inst.config.horizon_cap)
}
