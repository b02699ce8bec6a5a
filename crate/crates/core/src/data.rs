//! Dataset generation, file I/O, splitting, normalization, and windowing.
//!
//! The synthetic generator is built to manufacture *node heterogeneity*:
//! nodes are grouped into regimes with distinct period, phase, amplitude,
//! and squashing nonlinearity, and every node further carries a private
//! phase offset, amplitude factor, and nonlinearity blend. A model with
//! only shared parameters cannot fit all nodes at once, which is exactly
//! the failure mode per-node adaptation exists to repair.
//!
//! On disk a dataset is three files: a binary frame file (magic `STSD`),
//! a sibling `.adj` text file of `src,dst,weight` edges, and a `.meta.txt`
//! sidecar echoing provenance. Frames are stored as 32-bit floats and
//! promoted to 64-bit in memory; the generator quantizes through 32-bit
//! at creation so a save/load round trip is bit-exact.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STSD";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct GraphSignalDataset {
    /// `[steps x nodes x features]`.
    pub frames: Tensor,
    /// Directed weighted edges, 0-indexed.
    pub edges: Vec<(usize, usize, f64)>,
    /// Abstract duration of one frame; provenance only.
    pub frame_interval_steps: u32,
    pub name: String,
    /// Echo of the generator parameters, when the data is synthetic.
    pub generator_spec: Option<String>,
}

impl GraphSignalDataset {
    pub fn new(frames: Tensor, edges: Vec<(usize, usize, f64)>) -> Result<GraphSignalDataset> {
        let ds = GraphSignalDataset {
            frames,
            edges,
            frame_interval_steps: 1,
            name: "dataset".to_string(),
            generator_spec: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn steps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.shape()[2]
    }

    fn validate(&self) -> Result<()> {
        match self.frames.shape() {
            [t, n, d] if *t > 0 && *n > 0 && *d > 0 => {}
            s => {
                return Err(Error::Data(format!(
                    "frames must be a non-empty steps x nodes x features tensor, got {s:?}"
                )))
            }
        }
        if !self.frames.all_finite() {
            return Err(Error::Data("frames contain non-finite values".to_string()));
        }
        let n = self.num_nodes();
        for &(src, dst, w) in &self.edges {
            if src >= n || dst >= n {
                return Err(Error::Data(format!(
                    "edge ({src}, {dst}) out of range for {n} nodes"
                )));
            }
            if !w.is_finite() {
                return Err(Error::Data(format!("edge ({src}, {dst}) has weight {w}")));
            }
        }
        Ok(())
    }
}

/// Which regime a node belongs to: contiguous blocks of (nearly) equal size.
fn regime_of(node: usize, num_nodes: usize, regimes: usize) -> usize {
    node * regimes / num_nodes
}

/// Builds a heterogeneous synthetic dataset. Nodes split into `num_regimes`
/// contiguous groups; regime `r` oscillates with period `24 * 1.45^r`,
/// amplitude `1.6^r`, a
/// golden-angle phase, and a squashing nonlinearity cycling through
/// identity / tanh / cubic / half-wave. Each node privately jitters its
/// phase, scale, and nonlinearity blend, so even same-regime nodes differ.
/// The adjacency is a ring over all nodes plus random intra-regime edges.
pub fn generate_synthetic(
    num_nodes: usize,
    steps: usize,
    num_regimes: usize,
    noise_std: f64,
    seed: u64,
) -> Result<GraphSignalDataset> {
    if num_regimes < 2 || num_nodes < num_regimes {
        return Err(Error::Argument(format!(
            "need nodes >= regimes >= 2, got {num_nodes} nodes, {num_regimes} regimes"
        )));
    }
    if steps < 200 {
        return Err(Error::Argument(format!(
            "need at least 200 steps, got {steps}"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Argument(format!("invalid noise level {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Private node character, drawn in node order.
    let mut phase_jitter = Vec::with_capacity(num_nodes);
    let mut scale = Vec::with_capacity(num_nodes);
    let mut blend = Vec::with_capacity(num_nodes);
    for _ in 0..num_nodes {
        phase_jitter.push(rng.gen_range(-0.25..0.25));
        scale.push(rng.gen_range(0.7..1.35));
        blend.push(rng.gen_range(0.0..1.0));
    }

    let squash = |regime: usize, u: f64| -> f64 {
        match regime % 4 {
            0 => u,
            1 => (2.0 * u).tanh(),
            2 => 0.5 * u * u * u,
            _ => u.max(0.0),
        }
    };

    let mut values = Vec::with_capacity(steps * num_nodes);
    for t in 0..steps {
        for i in 0..num_nodes {
            let r = regime_of(i, num_nodes, num_regimes);
            let period = 24.0 * 1.45f64.powi(r as i32);
            let base_phase = r as f64 * 2.399963;
            let amp = 1.6f64.powi(r as i32);
            let angle = std::f64::consts::TAU * t as f64 / period + base_phase + phase_jitter[i];
            let u = angle.sin()
                + 0.3 * (2.0 * std::f64::consts::TAU * t as f64 / period
                    + 2.1 * base_phase
                    + phase_jitter[i])
                    .sin();
            let shaped = (1.0 - blend[i]) * u + blend[i] * squash(r, u);
            let noise = if noise_std > 0.0 {
                noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let v = amp * scale[i] * shaped + noise;
            // Quantize through the on-disk precision so save/load round-trips
            // bit-exactly.
            values.push(v as f32 as f64);
        }
    }
    let frames = Tensor::new(vec![steps, num_nodes, 1], values)?;

    let mut edges = Vec::new();
    for i in 0..num_nodes {
        let j = (i + 1) % num_nodes;
        edges.push((i, j, 1.0));
        edges.push((j, i, 1.0));
    }
    for r in 0..num_regimes {
        let members: Vec<usize> = (0..num_nodes)
            .filter(|&i| regime_of(i, num_nodes, num_regimes) == r)
            .collect();
        if members.len() < 3 {
            continue;
        }
        for _ in 0..members.len().div_ceil(2) {
            let a = members[rng.gen_range(0..members.len())];
            let b = members[rng.gen_range(0..members.len())];
            if a == b {
                continue;
            }
            let w = (rng.gen_range(0.5..1.5) as f32) as f64;
            edges.push((a, b, w));
            edges.push((b, a, w));
        }
    }

    let mut ds = GraphSignalDataset::new(frames, edges)?;
    ds.name = "synthetic".to_string();
    ds.generator_spec = Some(format!(
        "nodes={num_nodes} steps={steps} regimes={num_regimes} noise={noise_std} seed={seed}"
    ));
    Ok(ds)
}

fn adjacency_path(path: &Path) -> PathBuf {
    path.with_extension("adj")
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.txt")
}

/// Writes the frame file, the sibling `.adj` edge list, and the `.meta.txt`
/// sidecar.
pub fn save_dataset(ds: &GraphSignalDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let (t, n, d) = (ds.steps(), ds.num_nodes(), ds.feat_dim());
    if t > u32::MAX as usize || n > u32::MAX as usize || d > u32::MAX as usize {
        return Err(Error::Argument("dataset too large for the format".to_string()));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for v in ds.frames.values() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;

    let mut adj = String::new();
    for &(src, dst, weight) in &ds.edges {
        adj.push_str(&format!("{src},{dst},{weight}\n"));
    }
    fs::write(adjacency_path(path), adj)?;

    let mut meta = String::new();
    meta.push_str(&format!("name: {}\n", ds.name));
    meta.push_str(&format!("frame_interval_steps: {}\n", ds.frame_interval_steps));
    if let Some(spec) = &ds.generator_spec {
        meta.push_str(&format!("generator: {spec}\n"));
    }
    fs::write(meta_path(path), meta)?;
    Ok(())
}

/// Reads a dataset saved by [`save_dataset`]. The `.adj` sibling is
/// required; the `.meta.txt` sidecar is optional.
pub fn load_dataset(path: &Path) -> Result<GraphSignalDataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 18 {
        return Err(Error::Length(format!(
            "dataset header needs 18 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let read_u32 = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let t = read_u32(6) as usize;
    let n = read_u32(10) as usize;
    let d = read_u32(14) as usize;
    if t == 0 || n == 0 || d == 0 {
        return Err(Error::Data(format!("empty dataset: {t}x{n}x{d}")));
    }
    let expected = (t as u64)
        .checked_mul(n as u64)
        .and_then(|v| v.checked_mul(d as u64))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("dataset dimensions overflow".to_string()))?;
    let payload = &bytes[18..];
    if payload.len() as u64 != expected {
        return Err(Error::Length(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(t * n * d);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        values.push(v as f64);
    }
    let frames = Tensor::new(vec![t, n, d], values)?;

    let adj_text = fs::read_to_string(adjacency_path(path))?;
    let mut edges = Vec::new();
    for (lineno, line) in adj_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "adjacency line {} is not src,dst,weight: `{line}`",
                lineno + 1
            )));
        }
        let src: usize = parts[0].trim().parse().map_err(|_| {
            Error::Format(format!("adjacency line {}: bad source `{}`", lineno + 1, parts[0]))
        })?;
        let dst: usize = parts[1].trim().parse().map_err(|_| {
            Error::Format(format!("adjacency line {}: bad target `{}`", lineno + 1, parts[1]))
        })?;
        let weight: f64 = parts[2].trim().parse().map_err(|_| {
            Error::Format(format!("adjacency line {}: bad weight `{}`", lineno + 1, parts[2]))
        })?;
        edges.push((src, dst, weight));
    }

    let mut ds = GraphSignalDataset::new(frames, edges)?;
    if let Ok(meta) = fs::read_to_string(meta_path(path)) {
        for line in meta.lines() {
            if let Some((key, value)) = line.split_once(':') {
                let value = value.trim();
                match key.trim() {
                    "name" => ds.name = value.to_string(),
                    "frame_interval_steps" => {
                        ds.frame_interval_steps = value.parse().map_err(|_| {
                            Error::Format(format!("bad frame_interval_steps `{value}`"))
                        })?
                    }
                    "generator" => ds.generator_spec = Some(value.to_string()),
                    _ => {}
                }
            }
        }
    }
    Ok(ds)
}

/// Chronological split ratios; positive and summing to one.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<SplitSpec> {
        let s = SplitSpec { train, val, test };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        for (label, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{label} ratio must be positive, got {v}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    /// Accepts weights like `6:2:2` or `0.7:0.1:0.2`; they are normalized
    /// by their sum.
    fn from_str(s: &str) -> Result<SplitSpec> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Argument(format!(
                "split must be three `:`-separated weights, got `{s}`"
            )));
        }
        let mut w = [0.0f64; 3];
        for (slot, part) in w.iter_mut().zip(&parts) {
            *slot = part
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("bad split weight `{part}`")))?;
            if !(*slot > 0.0 && slot.is_finite()) {
                return Err(Error::Argument(format!("split weight `{part}` must be positive")));
            }
        }
        let total = w[0] + w[1] + w[2];
        SplitSpec::new(w[0] / total, w[1] / total, w[2] / total)
    }
}

/// Frame index ranges for the three chronological partitions:
/// `floor(T*train)` frames, then `floor(T*val)`, then the remainder.
pub fn chronological_split(
    steps: usize,
    spec: &SplitSpec,
) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>)> {
    spec.validate()?;
    let n_train = (steps as f64 * spec.train).floor() as usize;
    let n_val = (steps as f64 * spec.val).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= steps {
        return Err(Error::Argument(format!(
            "split {}:{}:{} leaves an empty partition at {steps} frames",
            spec.train, spec.val, spec.test
        )));
    }
    Ok((
        0..n_train,
        n_train..n_train + n_val,
        n_train + n_val..steps,
    ))
}

/// Copies a frame range out of a `[T x N x D]` tensor.
pub fn slice_frames(frames: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
    let (t, n, d) = match frames.shape() {
        [t, n, d] => (*t, *n, *d),
        s => return Err(Error::dim(format!("frames must be 3-d, got {s:?}"))),
    };
    if range.end > t || range.start >= range.end {
        return Err(Error::Argument(format!(
            "frame range {range:?} invalid for {t} frames"
        )));
    }
    let row = n * d;
    let values = frames.values()[range.start * row..range.end * row].to_vec();
    Tensor::new(vec![range.len(), n, d], values)
}

/// Per-feature-channel normalization statistics, fit on training frames
/// only.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean and standard deviation per feature channel. A constant
/// channel gets std 1 (with a warning) so normalization never divides by
/// zero.
pub fn zscore_fit(train_frames: &Tensor) -> Result<ZScoreStats> {
    let d = match train_frames.shape() {
        [t, n, d] if *t > 0 && *n > 0 && *d > 0 => *d,
        s => return Err(Error::dim(format!("frames must be non-empty 3-d, got {s:?}"))),
    };
    let count = (train_frames.numel() / d) as f64;
    let mut mean = vec![0.0; d];
    for (i, v) in train_frames.values().iter().enumerate() {
        mean[i % d] += v;
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; d];
    for (i, v) in train_frames.values().iter().enumerate() {
        let e = v - mean[i % d];
        var[i % d] += e * e;
    }
    let mut std = Vec::with_capacity(d);
    for (c, v) in var.iter().enumerate() {
        let s = (v / count).sqrt();
        if s == 0.0 {
            log::warn!("feature channel {c} is constant; clamping its std to 1");
            std.push(1.0);
        } else {
            std.push(s);
        }
    }
    Ok(ZScoreStats { mean, std })
}

impl ZScoreStats {
    fn check(&self, x: &Tensor) -> Result<usize> {
        let d = self.mean.len();
        match x.shape().last() {
            Some(&last) if last == d => Ok(d),
            s => Err(Error::dim(format!(
                "stats cover {d} channels but data's trailing axis is {s:?}"
            ))),
        }
    }

    /// `(x - mean) / std` per channel, any leading shape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.check(x)?;
        let values = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), values)
    }

    /// Exact inverse of [`ZScoreStats::apply`].
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.check(x)?;
        let values = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), values)
    }
}

/// Sliding input/target windows over one partition.
#[derive(Debug, Clone)]
pub struct WindowSet {
    /// `[W x s x N x D]`.
    inputs: Tensor,
    /// `[W x h x N x D]`.
    targets: Tensor,
    in_len: usize,
    horizon: usize,
}

/// Every length-`s` window paired with the length-`h` window immediately
/// after it: `W = T_p - s - h + 1` pairs.
pub fn make_windows(frames: &Tensor, s: usize, h: usize) -> Result<WindowSet> {
    let (t, n, d) = match frames.shape() {
        [t, n, d] => (*t, *n, *d),
        sh => return Err(Error::dim(format!("frames must be 3-d, got {sh:?}"))),
    };
    if s == 0 || h == 0 {
        return Err(Error::Argument("window lengths must be positive".to_string()));
    }
    if t < s + h {
        return Err(Error::Argument(format!(
            "partition has {t} frames, needs at least {} for {s}-in/{h}-out windows",
            s + h
        )));
    }
    let w = t - s - h + 1;
    let row = n * d;
    let src = frames.values();
    let mut inputs = Vec::with_capacity(w * s * row);
    let mut targets = Vec::with_capacity(w * h * row);
    for start in 0..w {
        inputs.extend_from_slice(&src[start * row..(start + s) * row]);
        targets.extend_from_slice(&src[(start + s) * row..(start + s + h) * row]);
    }
    Ok(WindowSet {
        inputs: Tensor::new(vec![w, s, n, d], inputs)?,
        targets: Tensor::new(vec![w, h, n, d], targets)?,
        in_len: s,
        horizon: h,
    })
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_nodes(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn feat_dim(&self) -> usize {
        self.inputs.shape()[3]
    }

    /// Window `w`'s input as a fresh `[s x N x D]` tensor.
    pub fn input(&self, w: usize) -> Result<Tensor> {
        self.slice(&self.inputs, w)
    }

    /// Window `w`'s target as a fresh `[h x N x D]` tensor.
    pub fn target(&self, w: usize) -> Result<Tensor> {
        self.slice(&self.targets, w)
    }

    fn slice(&self, from: &Tensor, w: usize) -> Result<Tensor> {
        let shape = from.shape();
        if w >= shape[0] {
            return Err(Error::Argument(format!(
                "window {w} out of range for {} windows",
                shape[0]
            )));
        }
        let per = shape[1] * shape[2] * shape[3];
        Tensor::new(
            shape[1..].to_vec(),
            from.values()[w * per..(w + 1) * per].to_vec(),
        )
    }
}

/// A dataset split, normalized, and windowed — the shape every training and
/// evaluation entry point consumes.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: ZScoreStats,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub edges: Vec<(usize, usize, f64)>,
    pub num_nodes: usize,
    pub feat_dim: usize,
}

/// Split chronologically, fit normalization on the training frames only,
/// normalize every partition with those statistics, and window each.
pub fn prepare(
    ds: &GraphSignalDataset,
    split: &SplitSpec,
    s: usize,
    h: usize,
) -> Result<PreparedData> {
    let (tr, va, te) = chronological_split(ds.steps(), split)?;
    let train_frames = slice_frames(&ds.frames, tr)?;
    let val_frames = slice_frames(&ds.frames, va)?;
    let test_frames = slice_frames(&ds.frames, te)?;
    let stats = zscore_fit(&train_frames)?;
    let train = make_windows(&stats.apply(&train_frames)?, s, h)?;
    let val = make_windows(&stats.apply(&val_frames)?, s, h)?;
    let test = make_windows(&stats.apply(&test_frames)?, s, h)?;
    Ok(PreparedData {
        stats,
        train,
        val,
        test,
        edges: ds.edges.clone(),
        num_nodes: ds.num_nodes(),
        feat_dim: ds.feat_dim(),
    })
}
