//! The operator commands: pretrain, train, resume, eval and ablate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sdm_core::drivers::{AvDriver, BvDriver};
use sdm_core::metrics::{compute_metrics, cross_test, seed_aggregate, MetricsError, Pairing};
use sdm_core::rng;
use sdm_core::sac::{Agent, AgentState};
use sdm_core::scenario::{sample_many, Scenario};
use sdm_core::train::{game_trainer, init_agent, Mode, Schedule, TrainError, Trainer, UpdateRecord};
use thiserror::Error;

use crate::checkpoint::{digest, file_name, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::logs::{episode_json, update_json, write_metrics_csv, write_summary_csv, JsonLines, MetricsRow};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("seed {seed}: {source}")]
    Train { seed: u64, source: TrainError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Io(String),
    #[error("mode `{mode}` needs a pretrained AV checkpoint; run `sdm pretrain` first and pass --pretrained <checkpoint> (use {{seed}} in the path for several seeds)")]
    MissingPretrained { mode: &'static str },
    #[error("{0}")]
    Refused(String),
}

fn io<E: std::fmt::Display>(what: impl std::fmt::Display) -> impl FnOnce(E) -> CommandError {
    move |e| CommandError::Io(format!("{what}: {e}"))
}

/// A checkpoint written by a command.
#[derive(Debug, Clone, PartialEq)]
pub struct Written {
    pub path: PathBuf,
    pub seed: u64,
    pub total_steps: u64,
    pub digest: String,
}

/// The configuration echoed into checkpoints: everything except output and input paths,
/// so identical runs in different directories produce identical files.
fn portable_text(cfg: &RunConfig) -> String {
    cfg.entries()
        .into_iter()
        .filter(|(k, _)| !matches!(*k, "out" | "pretrained"))
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn marks_within(cfg: &RunConfig, offset: u64, end: u64) -> Vec<u64> {
    let mut m: Vec<u64> = cfg.checkpoint_marks.iter().copied().filter(|&s| s > offset && s < end).collect();
    m.push(end);
    m.sort_unstable();
    m.dedup();
    m
}

struct Phase<'a> {
    kind: &'a str,
    run_id: String,
    seed: u64,
    offset: u64,
    config: String,
    dir: PathBuf,
}

/// Runs `trainer` through `marks` (total steps), writing a checkpoint at each.
fn drive(trainer: &mut Trainer, phase: &Phase<'_>, marks: &[u64], snapshot_buffer: bool, log: &mut JsonLines) -> Result<Vec<Written>, CommandError> {
    let t0 = Instant::now();
    let mut written = Vec::new();
    let mut updates: Vec<UpdateRecord> = Vec::new();
    for &mark in marks {
        let result = trainer.run(mark - phase.offset, &mut updates);
        let wall = t0.elapsed().as_secs_f64();
        for u in updates.drain(..) {
            log.write(&update_json(&u, phase.offset, wall)).map_err(io("training log"))?;
        }
        log.flush().map_err(io("training log"))?;
        if let Err(source) = result {
            // Keep what was reached so a diverged run can be inspected.
            let total = phase.offset + trainer.counters.env_steps;
            save(trainer, phase, total, snapshot_buffer, &phase.dir.join(format!("aborted-{total}.sdm")))?;
            return Err(CommandError::Train { seed: phase.seed, source });
        }
        let path = phase.dir.join(file_name(mark));
        written.push(save(trainer, phase, mark, snapshot_buffer, &path)?);
    }
    Ok(written)
}

fn save(trainer: &Trainer, phase: &Phase<'_>, total: u64, snapshot_buffer: bool, path: &Path) -> Result<Written, CommandError> {
    let ck = Checkpoint {
        kind: phase.kind.to_string(),
        run_id: phase.run_id.clone(),
        seed: phase.seed,
        total_steps: total,
        step_offset: phase.offset,
        config: phase.config.clone(),
        state: trainer.encode_state(snapshot_buffer),
    };
    let digest = ck.save(path)?;
    Ok(Written { path: path.to_path_buf(), seed: phase.seed, total_steps: total, digest })
}

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<(), CommandError> {
    std::fs::create_dir_all(dir).map_err(io(dir.display()))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text()).map_err(io(dir.display()))
}

fn train_err(seed: u64) -> impl Fn(TrainError) -> CommandError {
    move |source| CommandError::Train { seed, source }
}

/// SAC pretraining of the AV against rule-based BVs, one directory per seed.
pub fn pretrain(cfg: &RunConfig) -> Result<Vec<Written>, CommandError> {
    cfg.validate()?;
    let sim = cfg.sim();
    let tc = cfg.train();
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let run_cfg = RunConfig { seeds: vec![seed], ..cfg.clone() };
        let dir = seed_dir(&cfg.out, seed);
        prepare_dir(&dir, &run_cfg)?;
        let source = cfg.source()?;
        let av = init_agent(Agent::Av, source.vehicle_count(), &sim, &tc, &mut rng::stream(seed, "init/av"));
        let mut t = Trainer::new(tc.clone(), sim, source, Schedule::SingleAgent, av, None, seed, "pretrain").map_err(train_err(seed))?;
        let config = portable_text(&run_cfg);
        let phase = Phase { kind: "pretrain", run_id: digest(format!("pretrain\n{config}").as_bytes())[..16].to_string(), seed, offset: 0, config, dir: dir.clone() };
        let mut log = JsonLines::create(&dir.join("train_log.jsonl")).map_err(io("training log"))?;
        out.extend(drive(&mut t, &phase, &marks_within(cfg, 0, cfg.steps), cfg.snapshot_buffer, &mut log)?);
    }
    Ok(out)
}

/// Resolved config with the mode's forced game settings written back.
pub fn resolve_mode(cfg: &RunConfig) -> (RunConfig, Option<String>) {
    let g = cfg.effective_game();
    let mut r = cfg.clone();
    let note = (cfg.mode == Mode::Isdm && (cfg.beta != g.beta || (cfg.f_av, cfg.f_bv) != (g.f_av, g.f_bv)))
        .then(|| format!("isdm forces beta = 0 and freq_ratio = 1:1 (configured beta = {}, freq_ratio = {}:{})", cfg.beta, cfg.f_av, cfg.f_bv));
    r.beta = g.beta;
    r.f_av = g.f_av;
    r.f_bv = g.f_bv;
    (r, note)
}

fn game_phase_trainer(cfg: &RunConfig, seed: u64, av: AgentState) -> Result<Trainer, CommandError> {
    game_trainer(&cfg.train(), cfg.sim(), cfg.source()?, cfg.mode, &cfg.game(), cfg.nsg_phase_length, av, seed).map_err(train_err(seed))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutput {
    pub checkpoints: Vec<Written>,
    pub notes: Vec<String>,
}

/// Game-phase training (or continued single-agent training for `non-game`).
pub fn train(cfg: &RunConfig) -> Result<TrainOutput, CommandError> {
    cfg.validate()?;
    let (cfg, note) = resolve_mode(cfg);
    let mut out = TrainOutput { notes: note.into_iter().collect(), ..TrainOutput::default() };
    for &seed in &cfg.seeds {
        let run_cfg = RunConfig { seeds: vec![seed], ..cfg.clone() };
        let (av, offset, origin) = match cfg.pretrained_for(seed) {
            Some(p) => {
                let ck = Checkpoint::load(&p)?;
                let (av, _) = ck.agents().map_err(|source| CheckpointError::Decode { path: p.display().to_string(), source })?;
                (av, ck.total_steps, digest(&ck.encode()))
            }
            None if cfg.mode == Mode::NonGame => {
                let n = cfg.source()?.vehicle_count();
                (init_agent(Agent::Av, n, &cfg.sim(), &cfg.train(), &mut rng::stream(seed, "init/av")), 0, String::from("scratch"))
            }
            None => return Err(CommandError::MissingPretrained { mode: cfg.mode.as_str() }),
        };
        let dir = seed_dir(&cfg.out, seed);
        prepare_dir(&dir, &run_cfg)?;
        let mut t = game_phase_trainer(&run_cfg, seed, av)?;
        let config = portable_text(&run_cfg);
        let run_id = digest(format!("{}\n{origin}\n{config}", cfg.mode.as_str()).as_bytes())[..16].to_string();
        let phase = Phase { kind: cfg.mode.as_str(), run_id, seed, offset, config, dir: dir.clone() };
        let mut log = JsonLines::create(&dir.join("train_log.jsonl")).map_err(io("training log"))?;
        let marks = marks_within(&run_cfg, offset, offset + cfg.game_steps);
        out.checkpoints.extend(drive(&mut t, &phase, &marks, cfg.snapshot_buffer, &mut log)?);
    }
    Ok(out)
}

/// Continues the run a checkpoint belongs to, up to `total_steps` (default: the configured budget).
pub fn resume(path: &Path, total_steps: Option<u64>) -> Result<TrainOutput, CommandError> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::from_text(&ck.config)?;
    let decode_err = |source| CheckpointError::Decode { path: path.display().to_string(), source };
    let (av, _) = ck.agents().map_err(decode_err)?;
    let seed = ck.seed;
    let mut t = if ck.kind == "pretrain" {
        let source = cfg.source()?;
        Trainer::new(cfg.train(), cfg.sim(), source, Schedule::SingleAgent, av, None, seed, "pretrain").map_err(train_err(seed))?
    } else {
        if Mode::parse(&ck.kind) != Some(cfg.mode) {
            return Err(CommandError::Refused(format!("checkpoint kind `{}` does not match its configured mode", ck.kind)));
        }
        game_phase_trainer(&cfg, seed, av)?
    };
    t.restore_state(&ck.state).map_err(decode_err)?;
    let mut notes = Vec::new();
    if t.buffer.is_empty() {
        notes.push(String::from("checkpoint has no buffer snapshot; the resumed run refills its buffer and will not match an uninterrupted run"));
    }
    let budget = if ck.kind == "pretrain" { cfg.steps } else { ck.step_offset + cfg.game_steps };
    let end = total_steps.unwrap_or(budget);
    if end <= ck.total_steps {
        return Err(CommandError::Refused(format!("checkpoint is already at {} steps (target {end})", ck.total_steps)));
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let phase = Phase { kind: &ck.kind, run_id: ck.run_id.clone(), seed, offset: ck.step_offset, config: ck.config.clone(), dir: dir.clone() };
    let mut log = JsonLines::append(&dir.join("train_log.jsonl")).map_err(io("training log"))?;
    let marks = marks_within(&cfg, ck.total_steps, end);
    let checkpoints = drive(&mut t, &phase, &marks, cfg.snapshot_buffer, &mut log)?;
    Ok(TrainOutput { checkpoints, notes })
}

/// One (AV, BV) checkpoint pair to evaluate; no BV checkpoint means rule-based BVs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub av: PathBuf,
    pub bv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOutput {
    pub rows: Vec<MetricsRow>,
    pub warnings: Vec<String>,
}

/// Evaluation scenarios for `seed`: sampled with the seed's eval stream, or the configured file.
pub fn eval_scenarios(cfg: &RunConfig, seed: u64) -> Result<(Vec<Scenario>, usize), CommandError> {
    if cfg.is_synthetic() {
        let mut r = rng::stream(seed, "eval/scenarios");
        let s = sample_many(&mut r, cfg.eval_episodes, cfg.vehicle_count, &cfg.sim(), &cfg.synthetic, "eval")
            .map_err(|e| CommandError::Refused(e.to_string()))?;
        Ok((s, 1))
    } else {
        let set = crate::scenario_file::load_scenarios(Path::new(&cfg.scenarios), &cfg.sim()).map_err(ConfigError::from)?;
        let per = cfg.eval_episodes.div_ceil(set.scenarios.len());
        Ok((set.scenarios, per))
    }
}

fn default_pairing(av: &Checkpoint, bv: Option<&Checkpoint>) -> Pairing {
    match bv {
        None => Pairing::RlAvVsRuleBv,
        Some(_) if av.kind == "pretrain" => Pairing::PretrainedAvVsRlBv,
        Some(_) => Pairing::RlAvVsRlBv,
    }
}

/// Cross-tests each pair, writing `metrics.csv`, `metrics_summary.csv` and `episodes.jsonl` into `cfg.out`.
pub fn eval(cfg: &RunConfig, pairs: &[EvalPair], pairing: Option<Pairing>) -> Result<EvalOutput, CommandError> {
    if pairs.is_empty() {
        return Err(CommandError::Refused(String::from("nothing to evaluate; pass at least one --av checkpoint")));
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(io(cfg.out.display()))?;
    let sim = cfg.sim();
    let mut out = EvalOutput::default();
    let mut episodes = JsonLines::create(&cfg.out.join("episodes.jsonl")).map_err(io("episode log"))?;
    for pair in pairs {
        let avc = Checkpoint::load(&pair.av)?;
        let bvc = pair.bv.as_deref().map(Checkpoint::load).transpose()?;
        let pairing = pairing.unwrap_or_else(|| default_pairing(&avc, bvc.as_ref()));
        let decode_err = |p: &Path| {
            let p = p.display().to_string();
            move |source| CheckpointError::Decode { path: p, source }
        };
        let (av, _) = avc.agents().map_err(decode_err(&pair.av))?;
        let bv = match (&bvc, &pair.bv) {
            (Some(c), Some(p)) => Some(
                c.agents()
                    .map_err(decode_err(p))?
                    .1
                    .ok_or_else(|| CommandError::Refused(format!("{}: checkpoint has no BV policy", p.display())))?,
            ),
            _ => None,
        };
        if pairing == Pairing::RlAvVsRlBv {
            if let Some(b) = &bvc {
                if b.run_id != avc.run_id {
                    out.warnings.push(format!(
                        "{} and {} come from different games; RL-AV vs RL-BV is meant to pair checkpoints from the same game",
                        pair.av.display(),
                        pair.bv.as_ref().unwrap().display()
                    ));
                }
            }
        }
        let seed = bvc.as_ref().map_or(avc.seed, |b| b.seed);
        let step = bvc.as_ref().map_or(avc.total_steps, |b| b.total_steps);
        let (scenarios, per) = eval_scenarios(cfg, seed)?;
        let bv_driver = match &bv {
            Some(b) => BvDriver::Policy(&b.policy),
            None => BvDriver::Rule(cfg.rule),
        };
        let records = cross_test(&AvDriver::Policy(&av.policy), &bv_driver, &scenarios, per, &sim, seed, &mut rng::stream(seed, "eval/jitter"))?;
        for r in &records {
            episodes.write(&episode_json(r, pairing.as_str(), step)).map_err(io("episode log"))?;
        }
        out.rows.push(MetricsRow { seed, checkpoint_step: step, report: compute_metrics(&records, pairing)? });
    }
    episodes.flush().map_err(io("episode log"))?;
    write_metrics_csv(&cfg.out.join("metrics.csv"), &out.rows).map_err(io("metrics.csv"))?;
    let mut aggs = Vec::new();
    for p in Pairing::ALL {
        let reports: Vec<_> = out.rows.iter().filter(|r| r.report.pairing == p).map(|r| r.report).collect();
        if !reports.is_empty() {
            aggs.push(seed_aggregate(&reports)?);
        }
    }
    write_summary_csv(&cfg.out.join("metrics_summary.csv"), &aggs).map_err(io("metrics_summary.csv"))?;
    Ok(out)
}

/// One SDM grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub beta: f64,
    pub f_av: u32,
    pub f_bv: u32,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("beta{}-{}to{}", self.beta, self.f_av, self.f_bv)
    }
}

/// The SDM rows of the ablation table: β = 0.2 at three ratios, then four β values at 5:1.
pub fn default_grid() -> Vec<Cell> {
    let mut g: Vec<Cell> = [(5, 1), (1, 1), (1, 5)].iter().map(|&(f_av, f_bv)| Cell { beta: 0.2, f_av, f_bv }).collect();
    g.extend([0.0, 1.0, 2.0, 10.0].iter().map(|&beta| Cell { beta, f_av: 5, f_bv: 1 }));
    g
}

/// Parses `beta@f_av:f_bv` items separated by commas, e.g. `0.2@5:1,0@5:1`.
pub fn parse_cells(text: &str) -> Result<Vec<Cell>, ConfigError> {
    text.split(',')
        .map(|item| {
            let item = item.trim();
            let bad = || ConfigError::BadValue { key: "cells".into(), value: item.into(), reason: "expected beta@f_av:f_bv".into() };
            let (b, r) = item.split_once('@').ok_or_else(bad)?;
            let beta: f64 = b.trim().parse().map_err(|_| bad())?;
            let (f_av, f_bv) = crate::config::parse_ratio(r)?;
            Ok(Cell { beta, f_av, f_bv })
        })
        .collect()
}

pub const ABLATION_HEADER: [&str; 14] =
    ["cell", "beta", "f_av", "f_bv", "pairing", "seed", "checkpoint_step", "av_cr", "bv_cr", "cps", "cpm", "episodes", "cpm_raw", "status"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: Cell,
    pub seed: u64,
    pub pairing: Pairing,
    pub result: Result<MetricsRow, String>,
}

fn run_cell(cfg: &RunConfig, cell: Cell, seed: u64, pretrained: &Path) -> Result<Vec<MetricsRow>, CommandError> {
    let cell_out = cfg.out.join(cell.name());
    let mut c = RunConfig { seeds: vec![seed], out: cell_out.clone(), mode: Mode::Sdm, beta: cell.beta, f_av: cell.f_av, f_bv: cell.f_bv, ..cfg.clone() };
    c.pretrained = Some(pretrained.display().to_string());
    let trained = train(&c)?;
    let last = trained.checkpoints.last().expect("training writes a final checkpoint").path.clone();
    let mut rows = Vec::new();
    for (pairing, av, bv) in [
        (Pairing::PretrainedAvVsRlBv, pretrained.to_path_buf(), Some(last.clone())),
        (Pairing::RlAvVsRuleBv, last.clone(), None),
        (Pairing::RlAvVsRlBv, last.clone(), Some(last.clone())),
    ] {
        let e = RunConfig { out: seed_dir(&cell_out, seed).join(format!("eval-{}", pairing.as_str())), ..c.clone() };
        rows.extend(eval(&e, &[EvalPair { av, bv }], Some(pairing))?.rows);
    }
    Ok(rows)
}

/// Pretrains once per seed, then trains and evaluates every cell × seed; failures are
/// recorded per cell and the batch continues. `jobs` > 1 runs cells concurrently.
pub fn ablate(cfg: &RunConfig, cells: &[Cell], jobs: usize) -> Result<Vec<AblationRow>, CommandError> {
    if cells.is_empty() {
        return Err(CommandError::Refused(String::from("ablation grid is empty")));
    }
    cfg.validate()?;
    let pre_cfg = RunConfig { out: cfg.out.join("pretrain"), ..cfg.clone() };
    let pre = pretrain(&pre_cfg)?;
    let tasks: Vec<(Cell, u64, PathBuf)> = cells
        .iter()
        .flat_map(|&cell| {
            pre.iter().filter(|w| w.total_steps == cfg.steps).map(move |w| (cell, w.seed, w.path.clone()))
        })
        .collect();
    let run = |(cell, seed, p): &(Cell, u64, PathBuf)| -> Vec<AblationRow> {
        let pairings = [Pairing::PretrainedAvVsRlBv, Pairing::RlAvVsRuleBv, Pairing::RlAvVsRlBv];
        match run_cell(cfg, *cell, *seed, p) {
            Ok(rows) => rows.into_iter().map(|r| AblationRow { cell: *cell, seed: *seed, pairing: r.report.pairing, result: Ok(r) }).collect(),
            Err(e) => pairings.iter().map(|&pairing| AblationRow { cell: *cell, seed: *seed, pairing, result: Err(e.to_string()) }).collect(),
        }
    };
    let jobs = jobs.max(1);
    let mut results: Vec<Vec<AblationRow>> = vec![Vec::new(); tasks.len()];
    if jobs == 1 {
        for (slot, task) in results.iter_mut().zip(&tasks) {
            *slot = run(task);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Vec<AblationRow>>> = tasks.iter().map(|_| Default::default()).collect();
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(task) = tasks.get(i) else { break };
                    *slots[i].lock().unwrap() = run(task);
                });
            }
        });
        results = slots.into_iter().map(|m| m.into_inner().unwrap()).collect();
    }
    let rows: Vec<AblationRow> = results.into_iter().flatten().collect();
    write_ablation_csv(&cfg.out.join("ablation.csv"), &rows).map_err(io("ablation.csv"))?;
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        let mut rec = vec![r.cell.name(), r.cell.beta.to_string(), r.cell.f_av.to_string(), r.cell.f_bv.to_string()];
        match &r.result {
            Ok(m) => {
                rec.extend(m.fields());
                rec.push("ok".into());
            }
            Err(e) => {
                rec.extend([r.pairing.as_str().to_string(), r.seed.to_string()]);
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(format!("error: {e}"));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
