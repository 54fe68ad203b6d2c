//! JSON-lines logs and metric CSV tables.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use sdm_core::metrics::{EpisodeRecord, MetricsReport, SeedAggregate};
use sdm_core::train::UpdateRecord;
use serde_json::{json, Value};

pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?) })
    }

    pub fn write(&mut self, v: &Value) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, v)?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn update_json(u: &UpdateRecord, step_offset: u64, wall_s: f64) -> Value {
    let mut v = json!({
        "round": u.round,
        "env_steps": u.env_steps,
        "total_steps": u.env_steps + step_offset,
        "agent": u.agent.as_str(),
        "role": u.role.as_str(),
        "critic_loss": u.critic_loss,
        "policy_loss": u.policy_loss,
        "wall_s": wall_s,
    });
    if let Some(r) = &u.report {
        v["plain_grad_norm"] = json!(r.plain_grad_norm);
        v["implicit_term_norm"] = json!(r.implicit_term_norm);
        v["cg_iterations"] = json!(r.cg_iterations);
        v["cg_converged"] = json!(r.cg_converged);
        v["fell_back_to_first_order"] = json!(r.fell_back_to_first_order);
    }
    v
}

pub fn episode_json(e: &EpisodeRecord, pairing: &str, checkpoint_step: u64) -> Value {
    json!({
        "pairing": pairing,
        "checkpoint_step": checkpoint_step,
        "scenario_id": e.scenario_id,
        "seed": e.seed,
        "steps": e.steps,
        "duration_s": e.duration_s,
        "av_distance_m": e.av_distance_m,
        "ended_by": e.ended_by.as_str(),
    })
}

pub const METRICS_HEADER: [&str; 9] = ["pairing", "seed", "checkpoint_step", "av_cr", "bv_cr", "cps", "cpm", "episodes", "cpm_raw"];

/// One evaluated (AV, BV) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub checkpoint_step: u64,
    pub report: MetricsReport,
}

impl MetricsRow {
    pub fn fields(&self) -> Vec<String> {
        let r = &self.report;
        vec![
            r.pairing.as_str().to_string(),
            self.seed.to_string(),
            self.checkpoint_step.to_string(),
            r.av_cr.to_string(),
            r.bv_cr.to_string(),
            r.cps.to_string(),
            r.cpm.to_string(),
            r.episodes.to_string(),
            r.cpm_raw.to_string(),
        ]
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, aggs: &[SeedAggregate]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "pairing", "seeds", "av_cr_mean", "bv_cr_mean", "cps_mean", "cpm_mean", "av_cr_sd", "bv_cr_sd", "cps_sd", "cpm_sd",
    ])?;
    for a in aggs {
        let m = &a.mean;
        let sd = |f: fn(&sdm_core::metrics::MetricValues) -> f64| a.spread.as_ref().map_or(String::from("undefined"), |s| f(s).to_string());
        w.write_record([
            a.pairing.as_str().to_string(),
            a.seeds.to_string(),
            m.av_cr.to_string(),
            m.bv_cr.to_string(),
            m.cps.to_string(),
            m.cpm.to_string(),
            sd(|s| s.av_cr),
            sd(|s| s.bv_cr),
            sd(|s| s.cps),
            sd(|s| s.cpm),
        ])?;
    }
    w.flush()?;
    Ok(())
}
