//! Evaluation: retrieval over a precomputed candidate index (cosine or
//! pair-energy ranking), recall@K with conservative tie handling,
//! macro-averaged classification metrics, similarity-matrix export, the
//! α-sensitivity sweep, and a cached-vs-recompute latency harness.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss::{pair_energy, LossConfig};
use crate::moe::{ForwardCtx, Model, MoEConfig, PredictorKind};
use crate::synth::{Dataset, ModalityRegistry, Split, TaskSpec};
use crate::train::{train, TrainConfig, TrainState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major cosine similarities of query predictions vs candidates.
    pub values: Vec<f64>,
    /// "x->y" style direction tag for reports.
    pub direction: String,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// mean(diagonal) - mean(off-diagonal); positive once training has
    /// separated positives from negatives.
    pub fn diagonal_margin(&self) -> f64 {
        let n = self.rows.min(self.cols);
        let mut diag = 0.0;
        let mut off = 0.0;
        let mut off_n = 0usize;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i == j && i < n {
                    diag += self.at(i, j);
                } else {
                    off += self.at(i, j);
                    off_n += 1;
                }
            }
        }
        diag / n as f64 - off / off_n.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyStats {
    pub cached_mean_s: f64,
    pub cached_p95_s: f64,
    pub full_mean_s: f64,
    pub full_p95_s: f64,
    pub speedup: f64,
    /// Candidate-side embedding computations per query.
    pub cached_candidate_computations: u64,
    pub full_candidate_computations: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_at: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    pub energy_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetrievalMode {
    Cosine,
    Energy { alpha: f64 },
}

/// Immutable precomputed candidate-side embeddings with cached norms. The
/// computation counter tracks how many candidate embeddings have been built
/// through this index's dataset (cached retrieval adds none).
pub struct CandidateIndex {
    pub output_sig: String,
    pub ids: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
    pub computations: Cell<u64>,
}

fn candidate_embedding(
    ds: &Dataset,
    outputs: &[usize],
    idx: usize,
    counter: &Cell<u64>,
) -> Result<Vec<f64>> {
    counter.set(counter.get() + 1);
    ds.concat_row(outputs, idx)
}

pub fn build_index(ds: &Dataset, split: Split, task: &TaskSpec) -> Result<CandidateIndex> {
    let range = ds.split_range(split);
    if range.is_empty() {
        return Err(Error::config("cannot index an empty split"));
    }
    let computations = Cell::new(0);
    let ids: Vec<usize> = range.collect();
    let mut vectors = Vec::with_capacity(ids.len());
    let mut norms = Vec::with_capacity(ids.len());
    for &idx in &ids {
        let v = candidate_embedding(ds, &task.outputs, idx, &computations)?;
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateVector("candidate embedding"));
        }
        vectors.push(v);
        norms.push(n);
    }
    Ok(CandidateIndex {
        output_sig: task.output_sig(),
        ids,
        vectors,
        norms,
        computations,
    })
}

/// Gate-A and gate-B predictions for one sample, eval mode.
pub fn query_prediction(
    model: &Model,
    ds: &Dataset,
    task: &TaskSpec,
    idx: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::no_grad();
    let per_modality: Vec<(usize, &[f64])> = task
        .inputs
        .iter()
        .map(|&m| Ok((m, ds.row(m, idx)?)))
        .collect::<Result<_>>()?;
    let e_x = model.input_embedding(&tape, task, &per_modality)?;
    let pred = model.predict(&tape, &e_x, task, &ForwardCtx::eval())?;
    let a = pred.out_a.borrow().data.clone();
    let b = pred.out_b.borrow().data.clone();
    Ok((a, b))
}

fn cosine_with(pred: &[f64], cand: &[f64], cand_norm: f64) -> Result<f64> {
    let pn = pred.iter().map(|x| x * x).sum::<f64>().sqrt();
    if pn == 0.0 {
        return Err(Error::DegenerateVector("query prediction"));
    }
    let dot: f64 = pred.iter().zip(cand).map(|(x, y)| x * y).sum();
    Ok(dot / (pn * cand_norm))
}

fn rank_candidates(scored: &mut Vec<(usize, f64)>, ascending: bool) {
    scored.sort_by(|a, b| {
        let ord = if ascending {
            a.1.partial_cmp(&b.1)
        } else {
            b.1.partial_cmp(&a.1)
        };
        ord.unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
}

/// Candidate ids ranked best-first. Cosine mode ranks gate-A cosine
/// descending; energy mode ranks pair energy ascending. Ties go to the
/// lower candidate id.
pub fn retrieve(
    model: &Model,
    ds: &Dataset,
    task: &TaskSpec,
    query_idx: usize,
    index: &CandidateIndex,
    mode: RetrievalMode,
) -> Result<Vec<usize>> {
    if index.output_sig != task.output_sig() {
        return Err(Error::config(format!(
            "index built for outputs \"{}\" but task {} needs \"{}\"",
            index.output_sig,
            task.id,
            task.output_sig()
        )));
    }
    let (out_a, out_b) = query_prediction(model, ds, task, query_idx)?;
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(index.ids.len());
    for (pos, &id) in index.ids.iter().enumerate() {
        let s = match mode {
            RetrievalMode::Cosine => {
                cosine_with(&out_a, &index.vectors[pos], index.norms[pos])?
            }
            RetrievalMode::Energy { alpha } => {
                pair_energy(&out_a, &out_b, &index.vectors[pos], alpha)?
            }
        };
        scored.push((id, s));
    }
    rank_candidates(&mut scored, matches!(mode, RetrievalMode::Energy { .. }));
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

/// Same ranking as cached `retrieve` in cosine mode, but rebuilding every
/// candidate embedding from the dataset per query (the "no precompute"
/// baseline for the latency harness).
pub fn retrieve_full_recompute(
    model: &Model,
    ds: &Dataset,
    task: &TaskSpec,
    query_idx: usize,
    index: &CandidateIndex,
) -> Result<Vec<usize>> {
    let (out_a, _) = query_prediction(model, ds, task, query_idx)?;
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(index.ids.len());
    for &id in &index.ids {
        let v = candidate_embedding(ds, &task.outputs, id, &index.computations)?;
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        scored.push((id, cosine_with(&out_a, &v, n)?));
    }
    rank_candidates(&mut scored, false);
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

/// Index-aligned similarity matrix: rows are the same split's queries in id
/// order, columns the index candidates, so the diagonal holds true pairs.
pub fn similarity_matrix(
    model: &Model,
    ds: &Dataset,
    task: &TaskSpec,
    query_indices: &[usize],
    index: &CandidateIndex,
) -> Result<SimilarityMatrix> {
    if query_indices.is_empty() {
        return Err(Error::config("similarity matrix needs at least one query"));
    }
    let mut values = Vec::with_capacity(query_indices.len() * index.ids.len());
    for &q in query_indices {
        let (out_a, _) = query_prediction(model, ds, task, q)?;
        for (pos, _) in index.ids.iter().enumerate() {
            values.push(cosine_with(&out_a, &index.vectors[pos], index.norms[pos])?);
        }
    }
    Ok(SimilarityMatrix {
        rows: query_indices.len(),
        cols: index.ids.len(),
        values,
        direction: format!("{}->{}", task.input_sig(), task.output_sig()),
    })
}

/// Recall@K on an index-aligned square matrix. Ranking is conservative:
/// any candidate tying the diagonal counts against the query, so the
/// diagonal's rank is 1 + |{j != i : sim[i][j] >= sim[i][i]}|.
pub fn recall_at_k(sim: &SimilarityMatrix, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if sim.rows != sim.cols {
        return Err(Error::ShapeMismatch {
            context: "recall_at_k",
            lhs: vec![sim.rows],
            rhs: vec![sim.cols],
        });
    }
    for &k in ks {
        if k == 0 || k > sim.cols {
            return Err(Error::config(format!(
                "recall K={k} out of range for {} candidates",
                sim.cols
            )));
        }
    }
    let mut ranks = Vec::with_capacity(sim.rows);
    for i in 0..sim.rows {
        let diag = sim.at(i, i);
        let beaten = (0..sim.cols)
            .filter(|&j| j != i && sim.at(i, j) >= diag)
            .count();
        ranks.push(beaten + 1);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / sim.rows as f64)
        })
        .collect())
}

/// Macro-averaged classification metrics. Classes absent from both the
/// predictions and the truth are excluded from the macro average.
pub fn classify_metrics(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<ClassMetrics> {
    if pred.is_empty() {
        return Err(Error::config("classify_metrics needs at least one sample"));
    }
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            context: "classify_metrics",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    for &l in pred.iter().chain(truth.iter()) {
        if l >= num_classes {
            return Err(Error::IndexOutOfRange {
                context: "class label",
                index: l,
                len: num_classes,
            });
        }
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if tp[c] + fp[c] + fneg[c] == 0 {
            continue;
        }
        present += 1;
        let p = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let r = if tp[c] + fneg[c] > 0 {
            tp[c] as f64 / (tp[c] + fneg[c]) as f64
        } else {
            0.0
        };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let n = present as f64;
    Ok(ClassMetrics {
        accuracy: correct as f64 / pred.len() as f64,
        precision: p_sum / n,
        recall: r_sum / n,
        f1: f_sum / n,
    })
}

/// Label prediction by treating classes as retrieval candidates: the
/// predicted class maximizes cosine against the one-hot class vectors,
/// i.e. the largest gate-A output coordinate (ties to the lower class).
pub fn classify_via_retrieval(
    model: &Model,
    ds: &Dataset,
    task: &TaskSpec,
    indices: &[usize],
    num_classes: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let (out_a, _) = query_prediction(model, ds, task, idx)?;
        if out_a.len() != num_classes {
            return Err(Error::ShapeMismatch {
                context: "classify_via_retrieval",
                lhs: vec![out_a.len()],
                rhs: vec![num_classes],
            });
        }
        let mut best = 0usize;
        for c in 1..num_classes {
            if out_a[c] > out_a[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Mean alignment energy over true (query, target) pairs.
pub fn mean_pair_energy(
    model: &Model,
    ds: &Dataset,
    task: &TaskSpec,
    indices: &[usize],
    alpha: f64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::config("mean_pair_energy needs at least one pair"));
    }
    let mut total = 0.0;
    for &idx in indices {
        let (a, b) = query_prediction(model, ds, task, idx)?;
        let target = ds.concat_row(&task.outputs, idx)?;
        total += pair_energy(&a, &b, &target, alpha)?;
    }
    Ok(total / indices.len() as f64)
}

fn mean_p95(samples: &mut [f64]) -> (f64, f64) {
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = ((samples.len() as f64) * 0.95).ceil() as usize;
    (mean, samples[pos.min(samples.len()) - 1])
}

/// Time cached-index retrieval against per-query full recomputation of all
/// candidate embeddings. One warmup pass per path is excluded from stats.
/// Wall-clock ratios are hardware-dependent; the hard guarantee is the
/// candidate-computation counts (0 per cached query, |index| per full one).
pub fn latency_harness(
    model: &Model,
    ds: &Dataset,
    task: &TaskSpec,
    query_indices: &[usize],
    index: &CandidateIndex,
    repeats: usize,
) -> Result<LatencyStats> {
    if repeats < 3 {
        return Err(Error::config("latency harness needs repeats >= 3"));
    }
    if query_indices.is_empty() {
        return Err(Error::config("latency harness needs at least one query"));
    }
    let q0 = query_indices[0];
    // warmup, excluded
    retrieve(model, ds, task, q0, index, RetrievalMode::Cosine)?;
    let mut cached = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let q = query_indices[r % query_indices.len()];
        let t0 = Instant::now();
        retrieve(model, ds, task, q, index, RetrievalMode::Cosine)?;
        cached.push(t0.elapsed().as_secs_f64());
    }
    let before_full = index.computations.get();
    retrieve_full_recompute(model, ds, task, q0, index)?; // warmup, excluded
    let mut full = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let q = query_indices[r % query_indices.len()];
        let t0 = Instant::now();
        retrieve_full_recompute(model, ds, task, q, index)?;
        full.push(t0.elapsed().as_secs_f64());
    }
    let full_per_query =
        (index.computations.get() - before_full) / (repeats as u64 + 1);
    let (cached_mean, cached_p95) = mean_p95(&mut cached);
    let (full_mean, full_p95) = mean_p95(&mut full);
    Ok(LatencyStats {
        cached_mean_s: cached_mean,
        cached_p95_s: cached_p95,
        full_mean_s: full_mean,
        full_p95_s: full_p95,
        speedup: full_mean / cached_mean,
        cached_candidate_computations: 0,
        full_candidate_computations: full_per_query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub r_at_1: f64,
}

/// Train one model per α from identical initialization and report test R@1
/// on the given task.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    alphas: &[f64],
    kind: PredictorKind,
    moe_cfg: &MoEConfig,
    ds: &Dataset,
    registry: &ModalityRegistry,
    tasks: &[TaskSpec],
    train_cfg: &TrainConfig,
    eval_task_id: usize,
) -> Result<Vec<AlphaPoint>> {
    if alphas.is_empty() {
        return Err(Error::config("alpha sweep needs at least one alpha"));
    }
    let task = tasks
        .iter()
        .find(|t| t.id == eval_task_id)
        .ok_or_else(|| Error::config(format!("eval task id {eval_task_id} unknown")))?;
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let loss_cfg = LossConfig {
            alpha,
            ..LossConfig::default()
        };
        loss_cfg.validate()?;
        let model = Model::init(kind, moe_cfg, registry, tasks, &[], train_cfg.seed)?;
        let mut state = TrainState::new();
        train(
            &model, ds, registry, tasks, &loss_cfg, train_cfg, &mut state, None,
        )?;
        let index = build_index(ds, Split::Test, task)?;
        let queries: Vec<usize> = ds.split_range(Split::Test).collect();
        let sim = similarity_matrix(&model, ds, task, &queries, &index)?;
        let r = recall_at_k(&sim, &[1])?;
        out.push(AlphaPoint {
            alpha,
            r_at_1: r[&1],
        });
    }
    Ok(out)
}

pub fn write_alpha_csv(points: &[AlphaPoint], w: &mut impl Write) -> Result<()> {
    writeln!(w, "alpha,r_at_1")?;
    for p in points {
        writeln!(w, "{},{}", p.alpha, p.r_at_1)?;
    }
    Ok(())
}

pub fn read_alpha_csv(r: impl std::io::Read) -> Result<Vec<AlphaPoint>> {
    let reader = BufReader::new(r);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != "alpha,r_at_1" {
                return Err(Error::format(format!("bad sweep CSV header: {line}")));
            }
            continue;
        }
        let mut parts = line.split(',');
        let alpha = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("bad sweep CSV row: {line}")))?;
        let r_at_1 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("bad sweep CSV row: {line}")))?;
        out.push(AlphaPoint { alpha, r_at_1 });
    }
    Ok(out)
}

/// CSV export: one header row, one row per query, then a summary line with
/// the diagonal-vs-off-diagonal margin.
pub fn export_similarity_matrix(sim: &SimilarityMatrix, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "direction,{}", sim.direction)?;
    writeln!(w)?;
    for i in 0..sim.rows {
        let row: Vec<String> = (0..sim.cols)
            .map(|j| format!("{}", sim.at(i, j) as f32))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    writeln!(w, "margin,{}", sim.diagonal_margin() as f32)?;
    w.flush()?;
    Ok(())
}

/// Reload an exported matrix (f32 precision). Returns the matrix and the
/// recorded margin.
pub fn read_similarity_csv(path: &Path) -> Result<(SimilarityMatrix, f64)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut direction = String::new();
    let mut values = Vec::new();
    let mut cols = 0usize;
    let mut margin = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            direction = line
                .strip_prefix("direction,")
                .ok_or_else(|| Error::format("similarity CSV missing direction header"))?
                .to_string();
            continue;
        }
        if let Some(m) = line.strip_prefix("margin,") {
            margin = Some(
                m.parse::<f64>()
                    .map_err(|_| Error::format("bad margin line"))?,
            );
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(format!("bad similarity CSV row: {line}")))?;
        if cols == 0 {
            cols = row.len();
        } else if row.len() != cols {
            return Err(Error::format("ragged similarity CSV"));
        }
        values.extend(row);
    }
    let rows = if cols > 0 { values.len() / cols } else { 0 };
    let margin = margin.ok_or_else(|| Error::format("similarity CSV missing margin line"))?;
    Ok((
        SimilarityMatrix {
            rows,
            cols,
            values,
            direction,
        },
        margin,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, ModalityKind, ModalitySpec, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn sim(rows: usize, cols: usize, values: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix {
            rows,
            cols,
            values,
            direction: "1->2".into(),
        }
    }

    #[test]
    fn recall_identity_dominant() {
        let m = sim(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let r = recall_at_k(&m, &[1, 3]).unwrap();
        assert_eq!(r[&1], 1.0);
        assert_eq!(r[&3], 1.0);
    }

    #[test]
    fn recall_three_by_three_oracle() {
        let m = sim(
            3,
            3,
            vec![0.9, 0.95, 0.1, 0.2, 0.8, 0.1, 0.1, 0.2, 0.7],
        );
        let r = recall_at_k(&m, &[1, 2]).unwrap();
        assert!((r[&1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r[&2], 1.0);
    }

    #[test]
    fn recall_uniform_matrix_is_zero_at_one() {
        let m = sim(4, 4, vec![0.5; 16]);
        let r = recall_at_k(&m, &[1, 4]).unwrap();
        assert_eq!(r[&1], 0.0, "ties count against the query");
        assert_eq!(r[&4], 1.0, "rank can never exceed the candidate count");
    }

    #[test]
    fn recall_monotone_in_k_and_range_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
        let m = sim(6, 6, vals);
        let r = recall_at_k(&m, &[1, 2, 3, 4, 5, 6]).unwrap();
        for k in 1..6 {
            assert!(r[&(k + 1)] >= r[&k]);
        }
        assert_eq!(r[&6], 1.0);
        assert!(recall_at_k(&m, &[7]).is_err());
        assert!(recall_at_k(&m, &[0]).is_err());
        let rect = sim(2, 3, vec![0.0; 6]);
        assert!(recall_at_k(&rect, &[1]).is_err());
    }

    #[test]
    fn classify_perfect_and_binary_oracles() {
        let perfect = classify_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(
            perfect,
            ClassMetrics {
                accuracy: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        // TP=1 FP=1 for class 1 over two samples
        let b = classify_metrics(&[1, 1], &[1, 0], 2).unwrap();
        assert!((b.accuracy - 0.5).abs() < 1e-12);
        // class 1: p=.5 r=1 f1=2/3; class 0: p=r=f1=0
        assert!((b.precision - 0.25).abs() < 1e-12);
        assert!((b.recall - 0.5).abs() < 1e-12);
        assert!((b.f1 - 1.0 / 3.0).abs() < 1e-12);

        let single = classify_metrics(&[2, 2], &[2, 2], 5).unwrap();
        assert_eq!(single.f1, 1.0, "absent classes excluded from the macro");

        assert!(classify_metrics(&[], &[], 2).is_err());
        assert!(classify_metrics(&[0], &[0, 1], 2).is_err());
        assert!(classify_metrics(&[5], &[0], 2).is_err());
    }

    #[test]
    fn classify_matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..25 {
            let classes = rng.random_range(2..=10usize);
            let n = rng.random_range(1..=100usize);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let got = classify_metrics(&pred, &truth, classes).unwrap();

            // independent brute-force confusion matrix
            let mut cm = vec![vec![0usize; classes]; classes];
            for (&p, &t) in pred.iter().zip(&truth) {
                cm[t][p] += 1;
            }
            let acc: f64 =
                (0..classes).map(|c| cm[c][c]).sum::<usize>() as f64 / n as f64;
            let (mut ps, mut rs, mut fs, mut cnt) = (0.0, 0.0, 0.0, 0);
            for c in 0..classes {
                let tp = cm[c][c];
                let fp: usize = (0..classes).filter(|&t| t != c).map(|t| cm[t][c]).sum();
                let fneg: usize = (0..classes).filter(|&p| p != c).map(|p| cm[c][p]).sum();
                if tp + fp + fneg == 0 {
                    continue;
                }
                cnt += 1;
                let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
                let r = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
                ps += p;
                rs += r;
                fs += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            }
            assert!((got.accuracy - acc).abs() < 1e-12);
            assert!((got.precision - ps / cnt as f64).abs() < 1e-12);
            assert!((got.recall - rs / cnt as f64).abs() < 1e-12);
            assert!((got.f1 - fs / cnt as f64).abs() < 1e-12);
        }
    }

    fn small_world() -> (ModalityRegistry, Vec<TaskSpec>, Dataset, Model) {
        let registry = ModalityRegistry::new(vec![
            ModalitySpec {
                id: 1,
                name: "a".into(),
                dim: 6,
                kind: ModalityKind::Continuous,
            },
            ModalitySpec {
                id: 2,
                name: "b".into(),
                dim: 8,
                kind: ModalityKind::Continuous,
            },
        ])
        .unwrap();
        let tasks = vec![
            TaskSpec {
                id: 1,
                inputs: vec![1],
                outputs: vec![2],
            },
            TaskSpec {
                id: 2,
                inputs: vec![2],
                outputs: vec![1],
            },
        ];
        let cfg = SynthConfig {
            latent_dim: 4,
            noise_std: 0.0,
            num_samples: 48,
            num_train: 32,
            num_val: 0,
            num_classes: None,
            seed: 3,
        };
        let (ds, _) = generate(&cfg, &registry).unwrap();
        let mut moe = MoEConfig::desk(2);
        moe.hidden = 8;
        moe.experts_per_modality = 2;
        moe.top_k = 1;
        moe.dropout_p = 0.0;
        let model =
            Model::init(PredictorKind::Moe, &moe, &registry, &tasks, &[], 3).unwrap();
        (registry, tasks, ds, model)
    }

    #[test]
    fn index_is_deterministic_and_counts() {
        let (_, tasks, ds, _) = small_world();
        let i1 = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        let i2 = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        assert_eq!(i1.vectors, i2.vectors);
        assert_eq!(i1.ids.len(), ds.split_range(Split::Test).len());
        assert_eq!(i1.computations.get(), i1.ids.len() as u64);
    }

    #[test]
    fn cached_retrieval_matches_recomputation_bit_for_bit() {
        let (_, tasks, ds, model) = small_world();
        let index = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        let queries: Vec<usize> = ds.split_range(Split::Test).collect();
        for &q in queries.iter().take(5) {
            let cached = retrieve(&model, &ds, &tasks[0], q, &index, RetrievalMode::Cosine)
                .unwrap();
            let full = retrieve_full_recompute(&model, &ds, &tasks[0], q, &index).unwrap();
            assert_eq!(cached, full);
        }
    }

    #[test]
    fn retrieval_counter_contract() {
        let (_, tasks, ds, model) = small_world();
        let index = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        let build_cost = index.computations.get();
        let q = ds.split_range(Split::Test).next().unwrap();
        retrieve(&model, &ds, &tasks[0], q, &index, RetrievalMode::Cosine).unwrap();
        assert_eq!(
            index.computations.get(),
            build_cost,
            "cached query adds zero candidate computations"
        );
        retrieve_full_recompute(&model, &ds, &tasks[0], q, &index).unwrap();
        assert_eq!(
            index.computations.get(),
            build_cost + index.ids.len() as u64,
            "full query recomputes every candidate"
        );
    }

    #[test]
    fn retrieve_exact_match_ranks_first_both_modes() {
        let (_, tasks, ds, model) = small_world();
        let index = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        // craft a query prediction equal to candidate 0 by checking the
        // tie rule instead: identical candidates rank by lower id
        let mut scored = vec![(7usize, 0.5), (3usize, 0.5), (9usize, 0.9)];
        rank_candidates(&mut scored, false);
        assert_eq!(
            scored.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![9, 3, 7]
        );
        // energy mode ascending with tie
        let mut scored = vec![(7usize, 0.5), (3usize, 0.5), (9usize, 0.1)];
        rank_candidates(&mut scored, true);
        assert_eq!(
            scored.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![9, 3, 7]
        );
        // mismatched task/index errors
        assert!(retrieve(
            &model,
            &ds,
            &tasks[1],
            ds.split_range(Split::Test).next().unwrap(),
            &index,
            RetrievalMode::Cosine
        )
        .is_err());
    }

    #[test]
    fn cosine_ranking_invariant_to_candidate_rescaling() {
        let (_, tasks, ds, model) = small_world();
        let index = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        let scaled = CandidateIndex {
            output_sig: index.output_sig.clone(),
            ids: index.ids.clone(),
            vectors: index
                .vectors
                .iter()
                .map(|v| v.iter().map(|x| x * 7.5).collect())
                .collect(),
            norms: index.norms.iter().map(|n| n * 7.5).collect(),
            computations: Cell::new(0),
        };
        let q = ds.split_range(Split::Test).next().unwrap();
        let a = retrieve(&model, &ds, &tasks[0], q, &index, RetrievalMode::Cosine).unwrap();
        let b = retrieve(&model, &ds, &tasks[0], q, &scaled, RetrievalMode::Cosine).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn similarity_matrix_bounds_and_margin() {
        let (_, tasks, ds, model) = small_world();
        let index = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        let queries: Vec<usize> = ds.split_range(Split::Test).collect();
        let m = similarity_matrix(&model, &ds, &tasks[0], &queries, &index).unwrap();
        assert_eq!(m.rows, queries.len());
        assert_eq!(m.cols, index.ids.len());
        assert!(m.values.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        let _ = m.diagonal_margin(); // untrained: sign unasserted
    }

    #[test]
    fn similarity_csv_round_trips_at_f32() {
        let (_, tasks, ds, model) = small_world();
        let index = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        let queries: Vec<usize> = ds.split_range(Split::Test).take(4).collect();
        let m = similarity_matrix(&model, &ds, &tasks[0], &queries, &index).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("sim.csv");
        export_similarity_matrix(&m, &path).unwrap();
        let (back, margin) = read_similarity_csv(&path).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.cols, m.cols);
        assert_eq!(back.direction, m.direction);
        for (a, b) in m.values.iter().zip(back.values.iter()) {
            assert!((*a as f32 - *b as f32).abs() == 0.0);
        }
        assert!((margin - m.diagonal_margin() as f32 as f64).abs() < 1e-6);
    }

    #[test]
    fn latency_harness_counts_and_samples() {
        let (_, tasks, ds, model) = small_world();
        let index = build_index(&ds, Split::Test, &tasks[0]).unwrap();
        let queries: Vec<usize> = ds.split_range(Split::Test).collect();
        let stats =
            latency_harness(&model, &ds, &tasks[0], &queries, &index, 3).unwrap();
        assert_eq!(stats.cached_candidate_computations, 0);
        assert_eq!(stats.full_candidate_computations, index.ids.len() as u64);
        assert!(stats.cached_mean_s > 0.0 && stats.full_mean_s > 0.0);
        assert!(latency_harness(&model, &ds, &tasks[0], &queries, &index, 2).is_err());
    }

    #[test]
    fn alpha_csv_round_trips() {
        let points = vec![
            AlphaPoint {
                alpha: 0.0,
                r_at_1: 0.25,
            },
            AlphaPoint {
                alpha: 0.5,
                r_at_1: 0.875,
            },
            AlphaPoint {
                alpha: 1.0,
                r_at_1: 0.5,
            },
        ];
        let mut buf = Vec::new();
        write_alpha_csv(&points, &mut buf).unwrap();
        let back = read_alpha_csv(&buf[..]).unwrap();
        assert_eq!(points, back);
    }

    #[test]
    fn alpha_sweep_single_point_runs() {
        let (registry, tasks, ds, _) = small_world();
        let mut moe = MoEConfig::desk(2);
        moe.hidden = 8;
        moe.experts_per_modality = 2;
        moe.top_k = 1;
        moe.dropout_p = 0.0;
        let mut tc = TrainConfig::desk(vec![1, 2], 3);
        tc.steps = 4;
        tc.batch_size = 8;
        let points = alpha_sweep(
            &[0.5],
            PredictorKind::Moe,
            &moe,
            &ds,
            &registry,
            &tasks,
            &tc,
            1,
        )
        .unwrap();
        assert_eq!(points.len(), 1);
        assert!((0.0..=1.0).contains(&points[0].r_at_1));
        assert!(alpha_sweep(
            &[],
            PredictorKind::Moe,
            &moe,
            &ds,
            &registry,
            &tasks,
            &tc,
            1
        )
        .is_err());
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let mut r_at = BTreeMap::new();
        r_at.insert("1".to_string(), 0.9);
        let report = EvalReport {
            r_at,
            classification: None,
            latency: None,
            energy_mean: 0.12,
        };
        let v: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert!(v.get("r_at").is_some());
        assert!(v.get("energy_mean").is_some());
    }
}
