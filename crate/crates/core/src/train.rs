//! Alternating gradient descent over directional tasks: step i trains task
//! task_order[i mod T] with Adam, linear warmup + cosine decay, and
//! decoupled weight decay. A joint mode (every task's loss summed on the
//! same batch indices, one update) is kept for ablation.
//!
//! Determinism contract: (config, seed) fully determines the trajectory —
//! batch order, dropout masks, and initialization are all pure functions of
//! the seed and the step counter, so checkpoint resume needs no live RNG
//! state beyond the seed itself.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{constant, Tape};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig, LossReport};
use crate::moe::{ForwardCtx, Model, MoEConfig, PredictorKind};
use crate::synth::{
    batch_iter, derive_seed, Dataset, ModalityRegistry, ModalitySpec, Split, TaskSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Agd,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_mode")]
    pub mode: ScheduleMode,
    /// Task ids, cycled in order. Must be non-empty.
    pub task_order: Vec<usize>,
    pub seed: u64,
}

fn default_lr_init() -> f64 {
    1e-3
}
fn default_lr_final() -> f64 {
    5.5e-6
}
fn default_warmup() -> f64 {
    0.1
}
fn default_wd() -> f64 {
    0.005
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_mode() -> ScheduleMode {
    ScheduleMode::Agd
}

impl TrainConfig {
    pub fn desk(task_order: Vec<usize>, seed: u64) -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 64,
            lr_init: default_lr_init(),
            lr_final: default_lr_final(),
            warmup_frac: default_warmup(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            mode: ScheduleMode::Agd,
            task_order,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_order.is_empty() {
            return Err(Error::config("task_order must be non-empty"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac must be in [0, 1)"));
        }
        if !(self.lr_init >= self.lr_final && self.lr_final >= 0.0) {
            return Err(Error::config(format!(
                "need lr_init >= lr_final >= 0, got {} < {}",
                self.lr_init, self.lr_final
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must be in [0, 1)"));
        }
        Ok(())
    }
}

/// The task trained at step i: task_order[i mod T].
pub fn task_for_step(i: usize, task_order: &[usize]) -> Result<usize> {
    if task_order.is_empty() {
        return Err(Error::config("task_order must be non-empty"));
    }
    Ok(task_order[i % task_order.len()])
}

/// Linear warmup from 0 to lr_init over floor(warmup_frac * steps) steps,
/// then cosine decay to lr_final at i = steps. Continuous at the junction.
pub fn lr_at(i: usize, cfg: &TrainConfig) -> f64 {
    let steps = cfg.steps;
    if steps == 0 {
        return cfg.lr_init;
    }
    let warmup = (cfg.warmup_frac * steps as f64).floor() as usize;
    if i < warmup {
        return cfg.lr_init * i as f64 / warmup as f64;
    }
    let span = steps - warmup;
    if span == 0 {
        return cfg.lr_final;
    }
    let progress = (i - warmup) as f64 / span as f64;
    cfg.lr_final
        + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments for one tensor. `t` counts updates actually applied to this
/// tensor (parameters outside a step's graph don't advance).
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamSlot {
    fn new(n: usize) -> Self {
        AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Decoupled-weight-decay Adam update on one tensor's data, in place.
/// Weight decay multiplies parameters by (1 - lr*wd) before the moment
/// update is applied.
pub fn adam_update(
    data: &mut [f64],
    grad: &[f64],
    slot: &mut AdamSlot,
    lr: f64,
    cfg: &TrainConfig,
) {
    slot.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
    for i in 0..data.len() {
        data[i] *= 1.0 - lr * cfg.weight_decay;
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grad[i];
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub struct TrainState {
    pub step: u64,
    pub adam: BTreeMap<String, AdamSlot>,
}

impl TrainState {
    pub fn new() -> Self {
        TrainState {
            step: 0,
            adam: BTreeMap::new(),
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

/// One training-log line: {"step","task","l_reg","l_cl","total","mi_lb","lr"}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Task id; 0 in joint mode (ids are 1-based).
    pub task: usize,
    pub l_reg: f64,
    pub l_cl: f64,
    pub total: f64,
    pub mi_lb: f64,
    pub lr: f64,
}

/// How many times the task at order position `pos` has been trained in
/// steps [0, i).
fn occurrences(i: u64, pos: usize, t: usize) -> u64 {
    let (i, pos, t) = (i, pos as u64, t as u64);
    if i <= pos {
        0
    } else {
        (i - pos - 1) / t + 1
    }
}

/// Batch indices for a task-order position at a given occurrence count,
/// drawn from that task's independent seeded stream.
fn batch_for(
    ds: &Dataset,
    cfg: &TrainConfig,
    task_id: usize,
    occurrence: u64,
    contrastive: bool,
) -> Result<Vec<usize>> {
    let stream_seed = derive_seed(cfg.seed, "task-stream", task_id as u64);
    // probe one epoch to learn the batches-per-epoch count
    let epoch0 = batch_iter(ds, Split::Train, cfg.batch_size, stream_seed, 0, contrastive)?;
    let bpe = epoch0.len() as u64;
    if bpe == 0 {
        return Err(Error::config("training split yields no batches"));
    }
    let epoch = occurrence / bpe;
    let idx = (occurrence % bpe) as usize;
    if epoch == 0 {
        Ok(epoch0[idx].clone())
    } else {
        let batches = batch_iter(ds, Split::Train, cfg.batch_size, stream_seed, epoch, contrastive)?;
        Ok(batches[idx].clone())
    }
}

/// Forward a batch of one task; returns stacked (pred_a, pred_b, target).
pub(crate) fn forward_batch(
    model: &Model,
    ds: &Dataset,
    task: &TaskSpec,
    indices: &[usize],
    tape: &Tape,
    step_seed: u64,
    train: bool,
) -> Result<(
    crate::autodiff::ArrayRef,
    crate::autodiff::ArrayRef,
    crate::autodiff::ArrayRef,
)> {
    let mut rows_a = Vec::with_capacity(indices.len());
    let mut rows_b = Vec::with_capacity(indices.len());
    let mut target_flat = Vec::new();
    let mut target_dim = 0;
    for &idx in indices {
        let per_modality: Vec<(usize, &[f64])> = task
            .inputs
            .iter()
            .map(|&m| Ok((m, ds.row(m, idx)?)))
            .collect::<Result<_>>()?;
        let e_x = model.input_embedding(tape, task, &per_modality)?;
        let ctx = if train {
            ForwardCtx::train(step_seed, idx as u64)
        } else {
            ForwardCtx::eval()
        };
        let pred = model.predict(tape, &e_x, task, &ctx)?;
        rows_a.push(pred.out_a);
        rows_b.push(pred.out_b);
        let t = ds.concat_row(&task.outputs, idx)?;
        target_dim = t.len();
        target_flat.extend_from_slice(&t);
    }
    let pred_a = tape.stack_rows(&rows_a)?;
    let pred_b = tape.stack_rows(&rows_b)?;
    let target = constant(vec![indices.len(), target_dim], target_flat);
    Ok((pred_a, pred_b, target))
}

fn find_task<'t>(tasks: &'t [TaskSpec], id: usize) -> Result<&'t TaskSpec> {
    tasks
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::config(format!("task id {id} not in task list")))
}

/// Run one optimization step; advances `state.step`. Only parameters in the
/// step's forward graph receive weight decay and Adam updates.
pub fn train_step(
    model: &Model,
    ds: &Dataset,
    tasks: &[TaskSpec],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<StepRecord> {
    let i = state.step;
    let lr = lr_at(i as usize, cfg);
    let step_seed = derive_seed(cfg.seed, "step", i);
    let contrastive = loss_cfg.alpha < 1.0;
    let tape = Tape::new();
    model.zero_grads();

    let (record_task, report) = match cfg.mode {
        ScheduleMode::Agd => {
            let pos = (i as usize) % cfg.task_order.len();
            let task_id = cfg.task_order[pos];
            let task = find_task(tasks, task_id)?;
            let occurrence = occurrences(i + 1, pos, cfg.task_order.len()) - 1;
            let batch = batch_for(ds, cfg, task_id, occurrence, contrastive)?;
            let (pa, pb, tgt) = forward_batch(model, ds, task, &batch, &tape, step_seed, true)?;
            let (total, report) =
                total_loss(&tape, &pa, &pb, &tgt, loss_cfg).map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "step {i} task {task_id} batch[0]={}: {msg}",
                        batch[0]
                    )),
                    other => other,
                })?;
            tape.backward(&total)?;
            (task_id, report)
        }
        ScheduleMode::Joint => {
            // shared index stream; all task losses summed on the same batch
            let batch = batch_for(ds, cfg, 0, i, contrastive)?;
            let mut grand = None;
            let mut agg = LossReport {
                reg: 0.0,
                contrastive: 0.0,
                total: 0.0,
                mi_lower_bound: 0.0,
            };
            for &task_id in &cfg.task_order {
                let task = find_task(tasks, task_id)?;
                let (pa, pb, tgt) =
                    forward_batch(model, ds, task, &batch, &tape, step_seed, true)?;
                let (total, report) =
                    total_loss(&tape, &pa, &pb, &tgt, loss_cfg).map_err(|e| match e {
                        Error::Numeric(msg) => Error::Numeric(format!(
                            "step {i} task {task_id} batch[0]={}: {msg}",
                            batch[0]
                        )),
                        other => other,
                    })?;
                agg.reg += report.reg;
                agg.contrastive += report.contrastive;
                agg.total += report.total;
                agg.mi_lower_bound += report.mi_lower_bound;
                grand = Some(match grand {
                    None => total,
                    Some(g) => tape.add(&g, &total)?,
                });
            }
            tape.backward(&grand.expect("task_order non-empty"))?;
            (0, agg)
        }
    };

    for (name, p) in model.named_params() {
        if !tape.touched(&p) {
            continue;
        }
        let numel = p.borrow().numel();
        let slot = state
            .adam
            .entry(name)
            .or_insert_with(|| AdamSlot::new(numel));
        let mut pb = p.borrow_mut();
        let grad = pb.grad.clone();
        adam_update(&mut pb.data, &grad, slot, lr, cfg);
    }

    state.step += 1;
    Ok(StepRecord {
        step: i,
        task: record_task,
        l_reg: report.reg,
        l_cl: report.contrastive,
        total: report.total,
        mi_lb: report.mi_lower_bound,
        lr,
    })
}

/// Drive training for `cfg.steps` steps from the current state, appending
/// JSON-lines records to `log` (flushed at least every 50 steps).
pub fn train(
    model: &Model,
    ds: &Dataset,
    registry: &ModalityRegistry,
    tasks: &[TaskSpec],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    registry.validate()?;
    for t in tasks {
        registry.validate_task(t)?;
    }
    for &id in &cfg.task_order {
        find_task(tasks, id)?;
    }
    let mut history = Vec::with_capacity(cfg.steps);
    while (state.step as usize) < cfg.steps {
        let rec = train_step(model, ds, tasks, loss_cfg, cfg, state)?;
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            if rec.step % 50 == 49 {
                w.flush()?;
            }
        }
        history.push(rec);
    }
    if let Some(w) = log.as_deref_mut() {
        w.flush()?;
    }
    Ok(history)
}

/// Absolute gap between the two tasks' mean losses over their last `w`
/// logged steps each. Requires an AGD log with exactly two task ids.
pub fn convergence_gap(history: &[StepRecord], w: usize) -> Result<f64> {
    if w == 0 {
        return Err(Error::config("window must be positive"));
    }
    let mut ids: Vec<usize> = history.iter().map(|r| r.task).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != 2 {
        return Err(Error::config(format!(
            "convergence_gap needs exactly 2 task ids in the log, found {}",
            ids.len()
        )));
    }
    let mut means = Vec::new();
    for id in ids {
        let losses: Vec<f64> = history
            .iter()
            .filter(|r| r.task == id)
            .map(|r| r.total)
            .collect();
        if losses.len() < w {
            return Err(Error::config(format!(
                "task {id} has only {} logged steps, need {w}",
                losses.len()
            )));
        }
        let tail = &losses[losses.len() - w..];
        means.push(tail.iter().sum::<f64>() / w as f64);
    }
    Ok((means[0] - means[1]).abs())
}

// ---------------------------------------------------------------------------
// Checkpoint format: little-endian; magic "M3JP", version 1, length-prefixed
// config JSON, then a named-tensor table (params plus "adam.m.<name>",
// "adam.v.<name>", "adam.t.<name>" moment tensors) in f32, then a trailer of
// step u64 + length-prefixed rng bytes (the run seed).
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"M3JP";
const CKPT_VERSION: u32 = 1;

/// Everything needed to rebuild the model and resume training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: PredictorKind,
    pub moe: MoEConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub modalities: Vec<ModalitySpec>,
    pub tasks: Vec<TaskSpec>,
    pub adapter_modalities: Vec<usize>,
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::format("tensor name too long"));
    }
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    if shape.len() > u8::MAX as usize {
        return Err(Error::format("tensor rank too large"));
    }
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_checked(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated {
        what: what.to_string(),
        expected: buf.len() as u64,
        found: 0,
    })
}

fn read_u16(r: &mut impl Read, what: &'static str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_checked(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_checked(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_checked(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = read_u16(r, "tensor name length")? as usize;
    let mut name_bytes = vec![0u8; name_len];
    read_exact_checked(r, &mut name_bytes, "tensor name")?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::format("tensor name is not valid UTF-8"))?;
    let mut rank = [0u8; 1];
    read_exact_checked(r, &mut rank, "tensor rank")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(read_u32(r, "tensor dim")? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        read_exact_checked(r, &mut buf, "tensor data")?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok((name, shape, data))
}

pub fn save_checkpoint(
    model: &Model,
    state: &TrainState,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(meta)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;

    let params = model.named_params();
    let mut count = params.len();
    for (name, _) in &params {
        if state.adam.contains_key(name) {
            count += 3;
        }
    }
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, p) in &params {
        let pb = p.borrow();
        write_tensor(&mut w, name, &pb.shape, &pb.data)?;
        if let Some(slot) = state.adam.get(name) {
            write_tensor(&mut w, &format!("adam.m.{name}"), &pb.shape, &slot.m)?;
            write_tensor(&mut w, &format!("adam.v.{name}"), &pb.shape, &slot.v)?;
            write_tensor(&mut w, &format!("adam.t.{name}"), &[1], &[slot.t as f64])?;
        }
    }
    w.write_all(&state.step.to_le_bytes())?;
    let rng_bytes = meta.train.seed.to_le_bytes();
    w.write_all(&(rng_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&rng_bytes)?;
    w.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub state: TrainState,
    pub meta: CheckpointMeta,
    pub registry: ModalityRegistry,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_checked(&mut r, &mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected {CKPT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = read_u32(&mut r, "config length")? as usize;
    let mut json = vec![0u8; json_len];
    read_exact_checked(&mut r, &mut json, "config JSON")?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;

    let registry = ModalityRegistry::new(meta.modalities.clone())?;
    let model = Model::init(
        meta.kind,
        &meta.moe,
        &registry,
        &meta.tasks,
        &meta.adapter_modalities,
        meta.train.seed,
    )?;

    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let (name, shape, data) = read_tensor(&mut r)?;
        tensors.insert(name, (shape, data));
    }
    let step = read_u64(&mut r, "step trailer")?;
    let rng_len = read_u32(&mut r, "rng length")? as usize;
    let mut rng_bytes = vec![0u8; rng_len];
    read_exact_checked(&mut r, &mut rng_bytes, "rng bytes")?;

    let mut state = TrainState {
        step,
        adam: BTreeMap::new(),
    };
    for (name, p) in model.named_params() {
        let (shape, data) = tensors.remove(&name).ok_or_else(|| {
            Error::format(format!("checkpoint is missing tensor \"{name}\""))
        })?;
        {
            let mut pb = p.borrow_mut();
            if shape != pb.shape {
                return Err(Error::format(format!(
                    "tensor \"{name}\": checkpoint shape {shape:?} does not match model shape {:?}",
                    pb.shape
                )));
            }
            pb.data = data;
        }
        let m = tensors.remove(&format!("adam.m.{name}"));
        let v = tensors.remove(&format!("adam.v.{name}"));
        let t = tensors.remove(&format!("adam.t.{name}"));
        if let (Some((ms, m)), Some((_, v)), Some((_, t))) = (m, v, t) {
            if ms != p.borrow().shape {
                return Err(Error::format(format!(
                    "tensor \"adam.m.{name}\": shape mismatch"
                )));
            }
            state.adam.insert(
                name,
                AdamSlot {
                    m,
                    v,
                    t: t[0] as u64,
                },
            );
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(format!(
            "checkpoint tensor \"{extra}\" does not map onto the model"
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        state,
        meta,
        registry,
    })
}
