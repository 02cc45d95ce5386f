//! Paired multi-modality synthetic data with a known shared latent.
//!
//! Each sample draws a latent z ~ N(0, I); every continuous modality sees a
//! fixed seeded linear projection of z plus Gaussian noise, scaled to unit
//! L2 norm. A one-hot modality encodes the class argmax of a fixed linear
//! readout of z, so labels are a deterministic function of the shared
//! latent. Datasets persist in the little-endian M3DS binary format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ArrayRef, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Continuous,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    /// 1-based id; ids must be unique and contiguous.
    pub id: usize,
    pub name: String,
    pub dim: usize,
    pub kind: ModalityKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// 1-based task id.
    pub id: usize,
    /// Ordered input modality ids; the task input is their concatenation.
    pub inputs: Vec<usize>,
    /// Ordered output modality ids.
    pub outputs: Vec<usize>,
}

impl TaskSpec {
    /// Canonical signature of a modality set: sorted ids joined by '-'.
    pub fn signature(ids: &[usize]) -> String {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn input_sig(&self) -> String {
        Self::signature(&self.inputs)
    }

    pub fn output_sig(&self) -> String {
        Self::signature(&self.outputs)
    }
}

/// Declares the M modalities and T directional tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityRegistry {
    pub modalities: Vec<ModalitySpec>,
}

impl ModalityRegistry {
    pub fn new(modalities: Vec<ModalitySpec>) -> Result<Self> {
        let reg = ModalityRegistry { modalities };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::config("registry declares no modalities"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.id != i + 1 {
                return Err(Error::config(format!(
                    "modality ids must be contiguous from 1; found id {} at position {}",
                    m.id, i
                )));
            }
            if m.dim == 0 {
                return Err(Error::config(format!("modality {} has dim 0", m.id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: usize) -> Result<&ModalitySpec> {
        self.modalities
            .get(id.wrapping_sub(1))
            .filter(|m| m.id == id)
            .ok_or_else(|| Error::config(format!("unknown modality id {id}")))
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    /// Concatenated dimension of a modality set.
    pub fn concat_dim(&self, ids: &[usize]) -> Result<usize> {
        let mut total = 0;
        for &id in ids {
            total += self.get(id)?.dim;
        }
        Ok(total)
    }

    pub fn validate_task(&self, task: &TaskSpec) -> Result<()> {
        if task.inputs.is_empty() || task.outputs.is_empty() {
            return Err(Error::config(format!(
                "task {} must have non-empty input and output sets",
                task.id
            )));
        }
        for &id in task.inputs.iter().chain(task.outputs.iter()) {
            if self.get(id).is_err() {
                return Err(Error::config(format!(
                    "task {} references unknown modality id {}",
                    task.id, id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub noise_std: f64,
    pub num_samples: usize,
    /// Samples 0..num_train form the train split.
    pub num_train: usize,
    /// Samples num_train..num_train+num_val form the val split; the rest is test.
    #[serde(default)]
    pub num_val: usize,
    /// Required when a one-hot modality is declared.
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self, registry: &ModalityRegistry) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be non-negative"));
        }
        if self.num_train + self.num_val > self.num_samples {
            return Err(Error::config("splits exceed num_samples"));
        }
        for m in &registry.modalities {
            if m.kind == ModalityKind::OneHot {
                match self.num_classes {
                    None => {
                        return Err(Error::config(
                            "num_classes required for a one-hot modality",
                        ))
                    }
                    Some(c) if c != m.dim => {
                        return Err(Error::config(format!(
                            "one-hot modality {} dim {} must equal num_classes {}",
                            m.id, m.dim, c
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Index-aligned per-modality embedding matrices plus split markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<ModalitySpec>,
    pub num_samples: usize,
    pub train_end: usize,
    pub val_end: usize,
    /// Row-major num_samples × dim per modality, in declaration order.
    pub data: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..self.num_samples,
        }
    }

    pub fn modality_index(&self, id: usize) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.id == id)
            .ok_or_else(|| Error::config(format!("dataset has no modality id {id}")))
    }

    pub fn row(&self, modality_id: usize, sample: usize) -> Result<&[f64]> {
        let mi = self.modality_index(modality_id)?;
        let dim = self.modalities[mi].dim;
        if sample >= self.num_samples {
            return Err(Error::IndexOutOfRange {
                context: "dataset row",
                index: sample,
                len: self.num_samples,
            });
        }
        Ok(&self.data[mi][sample * dim..(sample + 1) * dim])
    }

    /// Concatenated embedding of a modality set for one sample.
    pub fn concat_row(&self, ids: &[usize], sample: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.row(id, sample)?);
        }
        Ok(out)
    }

    /// Class label of a one-hot modality row (position of its single 1).
    pub fn label(&self, modality_id: usize, sample: usize) -> Result<usize> {
        let row = self.row(modality_id, sample)?;
        row.iter()
            .position(|&v| v == 1.0)
            .ok_or_else(|| Error::numeric("one-hot row without a 1 entry"))
    }
}

/// The generator's hidden linear structure, exposed for oracle tests and
/// the noise-free retrieval ceiling. Never persisted.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub latent_dim: usize,
    /// Latent draws, num_samples × latent_dim.
    pub latents: Vec<f64>,
    /// Per modality: mixing matrix dim × latent_dim (None for one-hot).
    pub mixing: Vec<Option<Vec<f64>>>,
    /// Class readout num_classes × latent_dim when a one-hot modality exists.
    pub readout: Option<Vec<f64>>,
}

impl GroundTruth {
    /// Composition B·A⁺ mapping modality `from`'s clean embedding space into
    /// modality `to`'s, via the latent pseudo-inverse.
    pub fn cross_map(&self, ds: &Dataset, from: usize, to: usize) -> Result<Vec<f64>> {
        let fi = ds.modality_index(from)?;
        let ti = ds.modality_index(to)?;
        let a = self.mixing[fi]
            .as_ref()
            .ok_or_else(|| Error::config("cross_map needs continuous endpoints"))?;
        let b = self.mixing[ti]
            .as_ref()
            .ok_or_else(|| Error::config("cross_map needs continuous endpoints"))?;
        let d_from = ds.modalities[fi].dim;
        let d_to = ds.modalities[ti].dim;
        let l = self.latent_dim;
        // A⁺ = (AᵀA)⁻¹ Aᵀ for full-column-rank A (d_from×l, d_from >= l).
        let mut ata = vec![0.0; l * l];
        for p in 0..l {
            for q in 0..l {
                let mut acc = 0.0;
                for r in 0..d_from {
                    acc += a[r * l + p] * a[r * l + q];
                }
                ata[p * l + q] = acc;
            }
        }
        let inv = invert(&ata, l)?;
        // pinv = inv · Aᵀ  (l × d_from)
        let mut pinv = vec![0.0; l * d_from];
        for p in 0..l {
            for r in 0..d_from {
                let mut acc = 0.0;
                for q in 0..l {
                    acc += inv[p * l + q] * a[r * l + q];
                }
                pinv[p * d_from + r] = acc;
            }
        }
        // B · pinv  (d_to × d_from)
        let mut out = vec![0.0; d_to * d_from];
        for i in 0..d_to {
            for r in 0..d_from {
                let mut acc = 0.0;
                for p in 0..l {
                    acc += b[i * l + p] * pinv[p * d_from + r];
                }
                out[i * d_from + r] = acc;
            }
        }
        Ok(out)
    }
}

/// Gauss-Jordan inversion of an n×n matrix.
fn invert(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(Error::numeric("singular matrix in ground-truth inversion"));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let p = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r * n + j] -= f * a[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 step over seed xor salt
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-purpose seed derivation used across the crate.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    mix_seed(seed ^ h, index)
}

fn draw_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Generate a dataset from the shared-latent construction.
pub fn generate(cfg: &SynthConfig, registry: &ModalityRegistry) -> Result<(Dataset, GroundTruth)> {
    registry.validate()?;
    cfg.validate(registry)?;
    let l = cfg.latent_dim;
    let n = cfg.num_samples;

    let mut z_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "latent", 0));
    let latents = draw_normal(&mut z_rng, n * l);

    let mut mixing = Vec::new();
    let mut readout = None;
    let mut data = Vec::new();

    for m in &registry.modalities {
        match m.kind {
            ModalityKind::Continuous => {
                let mut map_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mixing", m.id as u64));
                let mut a = draw_normal(&mut map_rng, m.dim * l);
                for row in a.chunks_mut(l) {
                    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                }
                let mut noise_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "noise", m.id as u64));
                let mut rows = vec![0.0; n * m.dim];
                for i in 0..n {
                    let z = &latents[i * l..(i + 1) * l];
                    let row = &mut rows[i * m.dim..(i + 1) * m.dim];
                    for (r, arow) in row.iter_mut().zip(a.chunks(l)) {
                        let mut acc = 0.0;
                        for (av, zv) in arow.iter().zip(z.iter()) {
                            acc += av * zv;
                        }
                        *r = acc;
                    }
                    if cfg.noise_std > 0.0 {
                        for r in row.iter_mut() {
                            let e: f64 = StandardNormal.sample(&mut noise_rng);
                            *r += cfg.noise_std * e;
                        }
                    }
                    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return Err(Error::DegenerateVector("generated embedding"));
                    }
                    for r in row.iter_mut() {
                        *r /= norm;
                    }
                }
                mixing.push(Some(a));
                data.push(rows);
            }
            ModalityKind::OneHot => {
                let classes = cfg.num_classes.unwrap();
                let w = readout.get_or_insert_with(|| {
                    let mut r_rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "readout", 0));
                    draw_normal(&mut r_rng, classes * l)
                });
                let mut rows = vec![0.0; n * classes];
                for i in 0..n {
                    let z = &latents[i * l..(i + 1) * l];
                    let mut best = 0;
                    let mut best_v = f64::NEG_INFINITY;
                    for c in 0..classes {
                        let mut acc = 0.0;
                        for (wv, zv) in w[c * l..(c + 1) * l].iter().zip(z.iter()) {
                            acc += wv * zv;
                        }
                        if acc > best_v {
                            best_v = acc;
                            best = c;
                        }
                    }
                    rows[i * classes + best] = 1.0;
                }
                mixing.push(None);
                data.push(rows);
            }
        }
    }

    let ds = Dataset {
        modalities: registry.modalities.clone(),
        num_samples: n,
        train_end: cfg.num_train,
        val_end: cfg.num_train + cfg.num_val,
        data,
    };
    let gt = GroundTruth {
        latent_dim: l,
        latents,
        mixing,
        readout,
    };
    Ok((ds, gt))
}

/// Apply an optional trainable square adapter to a per-modality embedding.
/// Identity pass-through when the adapter is absent.
pub fn adapter_apply(tape: &Tape, e: &ArrayRef, adapter: Option<&ArrayRef>) -> Result<ArrayRef> {
    match adapter {
        None => Ok(e.clone()),
        Some(a) => {
            let sa = a.borrow().shape.clone();
            let se = e.borrow().shape.clone();
            if sa.len() != 2 || sa[0] != sa[1] || se.len() != 1 || sa[1] != se[0] {
                return Err(Error::ShapeMismatch {
                    context: "adapter_apply",
                    lhs: sa,
                    rhs: se,
                });
            }
            tape.matvec(a, e)
        }
    }
}

/// Seeded per-epoch batch index plan. The final short batch is dropped when
/// the contrastive loss is active (in-batch negatives need a full batch);
/// with the contrastive term off, B = 1 is allowed and the tail is kept.
pub fn batch_iter(
    ds: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    contrastive_active: bool,
) -> Result<Vec<Vec<usize>>> {
    let range = ds.split_range(split);
    let size = range.len();
    if contrastive_active && batch_size < 2 {
        return Err(Error::config(
            "batch size must be >= 2 when the contrastive loss is active",
        ));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if batch_size > size {
        return Err(Error::config(format!(
            "batch size {batch_size} exceeds split size {size}"
        )));
    }
    let mut order: Vec<usize> = range.collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batch", epoch));
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if contrastive_active {
        if let Some(last) = batches.last() {
            if last.len() < batch_size {
                batches.pop();
            }
        }
    }
    Ok(batches)
}

// ── M3DS binary format ──────────────────────────────────────────────

const M3DS_MAGIC: &[u8; 4] = b"M3DS";
const M3DS_VERSION: u32 = 1;

/// Write a dataset in the M3DS little-endian format. Payload values are
/// stored as f32 (explicit narrowing; loads widen back to f64).
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(M3DS_MAGIC)?;
    w.write_all(&M3DS_VERSION.to_le_bytes())?;
    w.write_all(&(ds.modalities.len() as u32).to_le_bytes())?;
    for m in &ds.modalities {
        let name = m.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(m.dim as u32).to_le_bytes())?;
        let kind: u8 = match m.kind {
            ModalityKind::Continuous => 0,
            ModalityKind::OneHot => 1,
        };
        w.write_all(&[kind])?;
    }
    w.write_all(&(ds.num_samples as u64).to_le_bytes())?;
    w.write_all(&(ds.train_end as u64).to_le_bytes())?;
    w.write_all(&(ds.val_end as u64).to_le_bytes())?;
    for rows in &ds.data {
        for &v in rows {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::Truncated {
                what: what.to_string(),
                expected: buf.len() as u64,
                found: filled as u64,
            });
        }
        filled += n;
    }
    Ok(())
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if &magic != M3DS_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected \"M3DS\"",
            magic
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != M3DS_VERSION {
        return Err(Error::format(format!(
            "unsupported M3DS version {version}"
        )));
    }
    let m_count = read_u32(&mut r, "modality count")? as usize;
    let mut modalities = Vec::with_capacity(m_count);
    for i in 0..m_count {
        let name_len = read_u16(&mut r, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or_truncated(&mut r, &mut name, "modality name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("modality name is not UTF-8"))?;
        let dim = read_u32(&mut r, "modality dim")? as usize;
        let mut kind = [0u8; 1];
        read_exact_or_truncated(&mut r, &mut kind, "modality kind")?;
        let kind = match kind[0] {
            0 => ModalityKind::Continuous,
            1 => ModalityKind::OneHot,
            k => return Err(Error::format(format!("unknown modality kind byte {k}"))),
        };
        modalities.push(ModalitySpec {
            id: i + 1,
            name,
            dim,
            kind,
        });
    }
    let num_samples = read_u64(&mut r, "num_samples")? as usize;
    let train_end = read_u64(&mut r, "train_end")? as usize;
    let val_end = read_u64(&mut r, "val_end")? as usize;
    if train_end > num_samples || val_end < train_end || val_end > num_samples {
        return Err(Error::format(format!(
            "invalid split markers train_end={train_end} val_end={val_end} num_samples={num_samples}"
        )));
    }
    let mut data = Vec::with_capacity(m_count);
    for m in &modalities {
        let count = num_samples * m.dim;
        let mut bytes = vec![0u8; count * 4];
        read_exact_or_truncated(&mut r, &mut bytes, &format!("payload of {}", m.name))?;
        let rows: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        data.push(rows);
    }
    Ok(Dataset {
        modalities,
        num_samples,
        train_end,
        val_end,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{constant, param};

    fn two_modal_registry() -> ModalityRegistry {
        ModalityRegistry::new(vec![
            ModalitySpec {
                id: 1,
                name: "a".into(),
                dim: 8,
                kind: ModalityKind::Continuous,
            },
            ModalitySpec {
                id: 2,
                name: "b".into(),
                dim: 6,
                kind: ModalityKind::Continuous,
            },
        ])
        .unwrap()
    }

    fn small_cfg(noise: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            latent_dim: 4,
            noise_std: noise,
            num_samples: 40,
            num_train: 32,
            num_val: 0,
            num_classes: None,
            seed,
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let reg = two_modal_registry();
        let cfg = small_cfg(0.1, 7);
        let (a, _) = generate(&cfg, &reg).unwrap();
        let (b, _) = generate(&cfg, &reg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_rejects_degenerate_config() {
        let reg = two_modal_registry();
        let mut cfg = small_cfg(0.0, 1);
        cfg.latent_dim = 0;
        assert!(generate(&cfg, &reg).is_err());
        let mut cfg = small_cfg(0.0, 1);
        cfg.num_samples = 0;
        assert!(generate(&cfg, &reg).is_err());
    }

    #[test]
    fn continuous_rows_are_unit_norm() {
        let reg = two_modal_registry();
        let (ds, _) = generate(&small_cfg(0.2, 3), &reg).unwrap();
        for m in &ds.modalities {
            for i in 0..ds.num_samples {
                let row = ds.row(m.id, i).unwrap();
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noise_free_ground_truth_map_retrieves_exactly() {
        let reg = two_modal_registry();
        let (ds, gt) = generate(&small_cfg(0.0, 11), &reg).unwrap();
        let map = gt.cross_map(&ds, 1, 2).unwrap();
        let (d1, d2) = (8, 6);
        for i in 0..ds.num_samples {
            let e1 = ds.row(1, i).unwrap();
            let mut pred = vec![0.0; d2];
            for r in 0..d2 {
                for c in 0..d1 {
                    pred[r] += map[r * d1 + c] * e1[c];
                }
            }
            let pn: f64 = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..ds.num_samples {
                let e2 = ds.row(2, j).unwrap();
                let dot: f64 = pred.iter().zip(e2.iter()).map(|(a, b)| a * b).sum();
                let n2: f64 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = dot / (pn * n2);
                if cos > best_v {
                    best_v = cos;
                    best = j;
                }
            }
            assert_eq!(best, i, "noise-free argmax must hit the paired sample");
        }
    }

    #[test]
    fn one_hot_rows_are_indicators() {
        let reg = ModalityRegistry::new(vec![
            ModalitySpec {
                id: 1,
                name: "x".into(),
                dim: 8,
                kind: ModalityKind::Continuous,
            },
            ModalitySpec {
                id: 2,
                name: "label".into(),
                dim: 5,
                kind: ModalityKind::OneHot,
            },
        ])
        .unwrap();
        let cfg = SynthConfig {
            latent_dim: 4,
            noise_std: 0.0,
            num_samples: 30,
            num_train: 20,
            num_val: 0,
            num_classes: Some(5),
            seed: 2,
        };
        let (ds, _) = generate(&cfg, &reg).unwrap();
        for i in 0..ds.num_samples {
            let row = ds.row(2, i).unwrap();
            let sum: f64 = row.iter().sum();
            assert_eq!(sum, 1.0);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn m3ds_round_trip() {
        let reg = two_modal_registry();
        let (ds, _) = generate(&small_cfg(0.05, 9), &reg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.m3ds");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.modalities, ds.modalities);
        assert_eq!(loaded.num_samples, ds.num_samples);
        assert_eq!(loaded.train_end, ds.train_end);
        assert_eq!(loaded.val_end, ds.val_end);
        // second round trip is exact: values are f32-representable after one pass
        let path2 = dir.path().join("d2.m3ds");
        save_dataset(&loaded, &path2).unwrap();
        let loaded2 = load_dataset(&path2).unwrap();
        assert_eq!(loaded, loaded2);
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap(),
            "save(load(file)) must be byte-identical"
        );
    }

    #[test]
    fn m3ds_corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.m3ds");
        std::fs::write(&path, b"NOPE0000000").unwrap();
        assert!(matches!(load_dataset(&path).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn m3ds_truncated_payload_is_truncation_error() {
        let reg = two_modal_registry();
        let (ds, _) = generate(&small_cfg(0.0, 5), &reg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.m3ds");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 64];
        let path2 = dir.path().join("cut.m3ds");
        let mut f = File::create(&path2).unwrap();
        f.write_all(cut).unwrap();
        drop(f);
        assert!(matches!(
            load_dataset(&path2).unwrap_err(),
            Error::Truncated { .. }
        ));
    }

    #[test]
    fn batch_iter_contract() {
        let reg = two_modal_registry();
        let mut cfg = small_cfg(0.0, 1);
        cfg.num_samples = 256 + 32;
        cfg.num_train = 256;
        let (ds, _) = generate(&cfg, &reg).unwrap();

        let b = batch_iter(&ds, Split::Train, 128, 1, 0, true).unwrap();
        assert_eq!(b.len(), 2);

        let b1 = batch_iter(&ds, Split::Train, 32, 9, 4, true).unwrap();
        let b2 = batch_iter(&ds, Split::Train, 32, 9, 4, true).unwrap();
        assert_eq!(b1, b2, "same (seed, epoch) gives the same order");
        let b3 = batch_iter(&ds, Split::Train, 32, 9, 5, true).unwrap();
        assert_ne!(b1, b3);

        assert!(batch_iter(&ds, Split::Train, 1, 0, 0, true).is_err());
        assert!(batch_iter(&ds, Split::Train, 1, 0, 0, false).is_ok());
        assert!(batch_iter(&ds, Split::Test, 512, 0, 0, true).is_err());

        // short-tail drop only when contrastive is active
        let with_tail = batch_iter(&ds, Split::Train, 100, 0, 0, false).unwrap();
        assert_eq!(with_tail.len(), 3);
        let dropped = batch_iter(&ds, Split::Train, 100, 0, 0, true).unwrap();
        assert_eq!(dropped.len(), 2);
    }

    #[test]
    fn adapter_identity_and_frozen() {
        let t = Tape::new();
        let e = constant(vec![3], vec![1.0, -2.0, 0.5]);
        let out = adapter_apply(&t, &e, None).unwrap();
        assert_eq!(out.borrow().data, e.borrow().data);

        let eye = param(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let out = adapter_apply(&t, &e, Some(&eye)).unwrap();
        assert_eq!(out.borrow().data, e.borrow().data);

        let bad = param(vec![2, 2], vec![1.0; 4]);
        assert!(adapter_apply(&t, &e, Some(&bad)).is_err());
    }
}
