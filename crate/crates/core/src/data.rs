//! Datasets, the binary record format, and batch sampling.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::objective::{BatchKind, ClassCounts, Target};
use crate::rng::{derive_seed, rng_for, stream, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// Labelled images with their class histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, classes: usize, split: Split, provenance: String) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Dataset(format!("record {i}: label {l} >= {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::from_labels(&self.labels, self.classes)
    }

    /// Sample indices grouped by class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize], split: Split, provenance: String) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
            provenance,
        }
    }
}

/// Exponential profile `n_i = round(n_max·τ^(−i/(C−1)))` for class rank
/// `i = 0..C`, with the last class pinned to `max(1, round(n_max/τ))`.
pub fn longtail_counts(classes: usize, n_max: usize, tau: f64) -> Result<Vec<usize>> {
    if !(tau >= 1.0) {
        return Err(Error::Config(format!("imbalance ratio must be >= 1, got {tau}")));
    }
    if classes == 0 {
        return Ok(Vec::new());
    }
    if classes == 1 {
        return Ok(vec![n_max]);
    }
    let mut counts: Vec<usize> = (0..classes)
        .map(|i| {
            let frac = i as f64 / (classes - 1) as f64;
            ((n_max as f64) * tau.powf(-frac)).round().max(1.0) as usize
        })
        .collect();
    counts[classes - 1] = ((n_max as f64 / tau).round() as usize).max(1);
    Ok(counts)
}

/// Down-samples a per-class pool to the exponential long-tailed profile.
/// Class `c` keeps `n_c` samples drawn without replacement.
pub fn make_longtailed(pool: &Dataset, n_max: usize, tau: f64, seed: u64) -> Result<Dataset> {
    let counts = longtail_counts(pool.classes, n_max, tau)?;
    let by_class = pool.by_class();
    let mut chosen = Vec::new();
    for (c, (members, &want)) in by_class.iter().zip(&counts).enumerate() {
        if members.len() < want {
            return Err(Error::Dataset(format!(
                "class {c}: pool holds {} samples, profile needs {want}",
                members.len()
            )));
        }
        let mut rng = rng_for(seed, &[stream::SUBSAMPLE, c as u64]);
        let mut picked: Vec<usize> = members.choose_multiple(&mut rng, want).copied().collect();
        picked.sort_unstable();
        chosen.extend(picked);
    }
    Ok(pool.subset(
        &chosen,
        Split::Train,
        format!("{}; longtail n_max={n_max} tau={tau} seed={seed}", pool.provenance),
    ))
}

/// Parameters of the procedural image generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub image_side: usize,
    /// Scale of per-sample geometric/colour jitter (0 disables).
    pub jitter: f64,
    /// Standard deviation of additive pixel noise (0 disables).
    pub noise: f64,
    /// Class-signature family; different families share no class.
    pub family: u64,
    /// Strength of the target-domain rendering shift (0 renders target
    /// domains like the pretraining domain).
    pub shift: f64,
}

struct ClassSignature {
    angle: f64,
    freq: f64,
    phase: f64,
    color_a: [f64; 3],
    color_b: [f64; 3],
    blob: (f64, f64),
    blob_radius: f64,
    blob_color: [f64; 3],
}

impl ClassSignature {
    fn draw(seed: u64, family: u64, class: usize) -> Self {
        let mut rng = rng_for(seed, &[stream::SYNTH, 0, family, class as u64]);
        let color = |rng: &mut SeededRng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let color_a = color(&mut rng);
        let color_b = color(&mut rng);
        let blob_color = color(&mut rng);
        ClassSignature {
            angle: rng.random_range(0.0..std::f64::consts::PI),
            freq: rng.random_range(1.0..4.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            color_a,
            color_b,
            blob: (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)),
            blob_radius: rng.random_range(0.12..0.3),
            blob_color,
        }
    }
}

/// Rendering shift between domains: domain 0 is the pretraining domain,
/// any other tag is a target domain whose statistics are shifted.
struct DomainShift {
    angle_offset: f64,
    freq_scale: f64,
    channel_roll: usize,
    contrast: f64,
    brightness: f64,
    cast: [f64; 3],
}

impl DomainShift {
    fn for_tag(tag: u64, strength: f64) -> Self {
        if tag == 0 || strength == 0.0 {
            return DomainShift {
                angle_offset: 0.0,
                freq_scale: 1.0,
                channel_roll: 0,
                contrast: 1.0,
                brightness: 0.0,
                cast: [0.0; 3],
            };
        }
        let mut rng = rng_for(tag, &[stream::SYNTH, 1]);
        let s = strength;
        let mut cast = [0.0; 3];
        let angle_offset = s * rng.random_range(0.25..0.6);
        let freq_scale = 1.0 + s * rng.random_range(0.2..0.5);
        let contrast = 1.0 - s * rng.random_range(0.25..0.45);
        let brightness = s * rng.random_range(0.05..0.15);
        for c in &mut cast {
            *c = s * rng.random_range(-0.15..0.15);
        }
        DomainShift {
            angle_offset,
            freq_scale,
            channel_roll: 1 + (tag as usize % 2),
            contrast: contrast.max(0.05),
            brightness,
            cast,
        }
    }
}

/// Renders one image of `class`; identical inputs give identical pixels.
/// Pixel values are quantised to multiples of 1/255 so that datasets
/// survive the binary format unchanged.
pub fn synth_image(params: &SynthParams, seed: u64, domain: u64, class: usize, index: u64) -> Image {
    let sig = ClassSignature::draw(seed, params.family, class);
    let shift = DomainShift::for_tag(domain, params.shift);
    let mut rng = rng_for(seed, &[stream::SYNTH, 2, params.family, domain, class as u64, index]);
    let j = params.jitter;
    let normal = |rng: &mut SeededRng| -> f64 { StandardNormal.sample(rng) };
    let angle = sig.angle + shift.angle_offset + j * 0.25 * normal(&mut rng);
    let freq = sig.freq * shift.freq_scale * (j * 0.15 * normal(&mut rng)).exp();
    let phase = sig.phase + j * rng.random_range(-1.0..1.0) * std::f64::consts::PI;
    let blob = (
        sig.blob.0 + j * 0.08 * normal(&mut rng),
        sig.blob.1 + j * 0.08 * normal(&mut rng),
    );
    let tint: [f64; 3] = [
        j * 0.08 * normal(&mut rng),
        j * 0.08 * normal(&mut rng),
        j * 0.08 * normal(&mut rng),
    ];

    let side = params.image_side;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut pixels = Vec::with_capacity(side * side * CHANNELS);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
            let wave = 0.5 + 0.5 * (std::f64::consts::TAU * freq * (u * ca + v * sa) + phase).sin();
            let dist = ((u - blob.0).powi(2) + (v - blob.1).powi(2)).sqrt();
            let inside = 1.0 / (1.0 + ((dist - sig.blob_radius) * 30.0).exp());
            let mut rgb = [0.0; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let base = sig.color_a[c] * wave + sig.color_b[c] * (1.0 - wave);
                *out = base * (1.0 - inside) + sig.blob_color[c] * inside + tint[c];
            }
            for c in 0..CHANNELS {
                let src = rgb[(c + shift.channel_roll) % CHANNELS];
                let mut val = 0.5 + (src - 0.5) * shift.contrast + shift.brightness + shift.cast[c];
                if params.noise > 0.0 {
                    val += params.noise * normal(&mut rng);
                }
                pixels.push(quantize(val));
            }
        }
    }
    Image::new(side, side, pixels)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Balanced dataset of `n_per_class` images per class, indices
/// `first_index..first_index + n_per_class` within each class.
pub fn synth_generate(params: &SynthParams, n_per_class: usize, seed: u64, domain: u64, first_index: u64, split: Split) -> Result<Dataset> {
    if params.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    let mut images = Vec::with_capacity(params.classes * n_per_class);
    let mut labels = Vec::with_capacity(params.classes * n_per_class);
    for c in 0..params.classes {
        for i in 0..n_per_class as u64 {
            images.push(synth_image(params, seed, domain, c, first_index + i));
            labels.push(c);
        }
    }
    Dataset::new(
        images,
        labels,
        params.classes,
        split,
        format!(
            "synthetic seed={seed} domain={domain} first_index={first_index} jitter={} noise={}",
            params.jitter, params.noise
        ),
    )
}

/// Bytes per record: one label byte plus three `H×W` colour planes.
pub fn record_size(height: usize, width: usize) -> usize {
    1 + CHANNELS * height * width
}

/// Parses records `[label][R plane][G plane][B plane]`, planes row-major,
/// bytes scaled by 1/255.
pub fn parse_binary(bytes: &[u8], height: usize, width: usize, classes: usize, split: Split, provenance: String) -> Result<Dataset> {
    let rec = record_size(height, width);
    if bytes.len() % rec != 0 {
        let full = bytes.len() / rec;
        return Err(Error::Dataset(format!(
            "size {} is not a multiple of the {rec}-byte record (expected {} or {} bytes); record {full} is truncated",
            bytes.len(),
            full * rec,
            (full + 1) * rec
        )));
    }
    let plane = height * width;
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for (i, chunk) in bytes.chunks_exact(rec).enumerate() {
        let label = chunk[0] as usize;
        if label >= classes {
            return Err(Error::Dataset(format!(
                "record {i}: label {label} >= {classes} classes"
            )));
        }
        let mut pixels = vec![0.0; plane * CHANNELS];
        for c in 0..CHANNELS {
            let src = &chunk[1 + c * plane..1 + (c + 1) * plane];
            for (p, &b) in src.iter().enumerate() {
                pixels[p * CHANNELS + c] = f64::from(b) / 255.0;
            }
        }
        images.push(Image::new(height, width, pixels));
        labels.push(label);
    }
    Dataset::new(images, labels, classes, split, provenance)
}

pub fn encode_binary(ds: &Dataset) -> Result<Vec<u8>> {
    let Some(first) = ds.images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut out = Vec::with_capacity(ds.len() * record_size(h, w));
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        if img.height != h || img.width != w {
            return Err(Error::Dataset("images of mixed sizes cannot share a file".into()));
        }
        out.push(u8::try_from(label).map_err(|_| Error::Dataset(format!("label {label} does not fit a byte")))?);
        for c in 0..CHANNELS {
            for p in 0..plane {
                out.push((img.pixels[p * CHANNELS + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_binary_dataset(path: &Path, height: usize, width: usize, classes: usize, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex_digest(&bytes);
    parse_binary(&bytes, height, width, classes, split, format!("file {} sha256={digest}", path.display()))
}

pub fn save_binary_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_binary(ds)?)
}

/// Manifest lines `class_id<TAB>count<TAB>name`.
pub fn manifest_text(counts: &ClassCounts, names: &[String]) -> String {
    let mut out = String::new();
    for (c, &n) in counts.as_slice().iter().enumerate() {
        let name = names.get(c).cloned().unwrap_or_else(|| format!("class_{c:03}"));
        out.push_str(&format!("{c}\t{n}\t{name}\n"));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<(usize, usize, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut parts = line.splitn(3, '\t');
            let bad = || Error::Dataset(format!("manifest line {}: `{line}`", i + 1));
            let id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let count = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let name = parts.next().ok_or_else(bad)?.to_string();
            Ok((id, count, name))
        })
        .collect()
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    Instance,
    ClassBalanced,
}

/// A mini-batch of images with targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub targets: Vec<Target>,
    pub kind: BatchKind,
}

impl Batch {
    pub fn from_indices(ds: &Dataset, indices: Vec<usize>, kind: BatchKind) -> Self {
        Batch {
            images: indices.iter().map(|&i| ds.images[i].clone()).collect(),
            targets: indices.iter().map(|&i| Target::single(ds.labels[i])).collect(),
            indices,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws batches of sample indices. Each epoch reseeds from
/// `(seed, epoch)`, so a run resumed at an epoch boundary replays the same
/// batches.
#[derive(Clone, Debug)]
pub struct Sampler {
    mode: SamplerMode,
    seed: u64,
    batch_size: usize,
    n: usize,
    by_class: Vec<Vec<usize>>,
    nonempty: Vec<usize>,
    rng: SeededRng,
    // instance: permutation and cursor
    order: Vec<usize>,
    cursor: usize,
    // class-balanced: per-class shuffled queues
    queues: Vec<Vec<usize>>,
}

impl Sampler {
    pub fn new(mode: SamplerMode, ds: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Dataset("cannot sample from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let by_class = ds.by_class();
        let nonempty = (0..ds.classes).filter(|&c| !by_class[c].is_empty()).collect();
        let tag = match mode {
            SamplerMode::Instance => stream::INSTANCE_SAMPLER,
            SamplerMode::ClassBalanced => stream::BALANCED_SAMPLER,
        };
        let mut s = Sampler {
            mode,
            seed: derive_seed(seed, &[tag]),
            batch_size,
            n: ds.len(),
            queues: vec![Vec::new(); by_class.len()],
            by_class,
            nonempty,
            rng: rng_for(0, &[]),
            order: Vec::new(),
            cursor: 0,
        };
        s.start_epoch(0);
        Ok(s)
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    /// Batches per epoch: `ceil(n / B)`.
    pub fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn start_epoch(&mut self, epoch: usize) {
        self.rng = rng_for(self.seed, &[epoch as u64]);
        self.cursor = 0;
        match self.mode {
            SamplerMode::Instance => {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
            }
            SamplerMode::ClassBalanced => {
                for q in &mut self.queues {
                    q.clear();
                }
            }
        }
    }

    /// Next batch of indices. Instance batches walk the epoch permutation
    /// (the final batch of an epoch may be short); class-balanced batches
    /// draw a class uniformly, then a member of that class, cycling through
    /// a shuffled copy of the class before repeating any member.
    pub fn next_indices(&mut self) -> Vec<usize> {
        match self.mode {
            SamplerMode::Instance => {
                if self.cursor >= self.n {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let end = (self.cursor + self.batch_size).min(self.n);
                let out = self.order[self.cursor..end].to_vec();
                self.cursor = end;
                out
            }
            SamplerMode::ClassBalanced => (0..self.batch_size)
                .map(|_| {
                    let c = self.nonempty[self.rng.random_range(0..self.nonempty.len())];
                    if self.queues[c].is_empty() {
                        let mut refill = self.by_class[c].clone();
                        refill.shuffle(&mut self.rng);
                        self.queues[c] = refill;
                    }
                    self.queues[c].pop().expect("non-empty class")
                })
                .collect(),
        }
    }

    pub fn next_batch(&mut self, ds: &Dataset) -> Batch {
        let kind = match self.mode {
            SamplerMode::Instance => BatchKind::Instance,
            SamplerMode::ClassBalanced => BatchKind::Balanced,
        };
        Batch::from_indices(ds, self.next_indices(), kind)
    }
}

/// One class-balanced and one instance-balanced stream with derived
/// sub-seeds.
#[derive(Clone, Debug)]
pub struct DualSampler {
    pub balanced: Sampler,
    pub instance: Sampler,
}

impl DualSampler {
    pub fn new(ds: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        Ok(DualSampler {
            balanced: Sampler::new(SamplerMode::ClassBalanced, ds, batch_size, seed)?,
            instance: Sampler::new(SamplerMode::Instance, ds, batch_size, seed)?,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.instance.steps_per_epoch()
    }

    pub fn start_epoch(&mut self, epoch: usize) {
        self.balanced.start_epoch(epoch);
        self.instance.start_epoch(epoch);
    }

    /// `(balanced, instance)` batches for one iteration.
    pub fn next_pair(&mut self, ds: &Dataset) -> (Batch, Batch) {
        (self.balanced.next_batch(ds), self.instance.next_batch(ds))
    }
}

/// Mixes each image with a partner from a shuffled pairing using
/// `λ ~ Beta(α, α)`.
pub fn mixup(batch: &Batch, alpha: f64, rng: &mut impl Rng) -> Result<Batch> {
    if batch.len() < 2 {
        return Ok(batch.clone());
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?
        .sample(rng);
    let mut partner: Vec<usize> = (0..batch.len()).collect();
    partner.shuffle(rng);
    Ok(mixup_with(batch, lambda, &partner))
}

/// Mixup with an explicit `λ` and partner permutation.
pub fn mixup_with(batch: &Batch, lambda: f64, partner: &[usize]) -> Batch {
    let images = batch
        .images
        .iter()
        .zip(partner)
        .map(|(img, &p)| img.blend(&batch.images[p], lambda))
        .collect();
    let targets = batch
        .targets
        .iter()
        .zip(partner)
        .map(|(t, &p)| Target {
            a: t.a,
            b: batch.targets[p].a,
            lambda,
        })
        .collect();
    Batch {
        indices: batch.indices.clone(),
        images,
        targets,
        kind: batch.kind,
    }
}

/// Pad-and-random-crop for every image in the batch.
pub fn augment(batch: &mut Batch, pad: usize, rng: &mut impl Rng) {
    if pad == 0 {
        return;
    }
    for img in &mut batch.images {
        let top = rng.random_range(0..=2 * pad);
        let left = rng.random_range(0..=2 * pad);
        *img = img.pad_crop(pad, top, left);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shot {
    Many,
    Medium,
    Few,
}

impl fmt::Display for Shot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shot::Many => "many",
            Shot::Medium => "medium",
            Shot::Few => "few",
        })
    }
}

/// Per-class many/medium/few assignment: many `n > many_above`, few
/// `n < few_below`, medium otherwise (both thresholds inclusive).
#[derive(Clone, Debug, PartialEq)]
pub struct ShotSplit {
    pub buckets: Vec<Shot>,
    pub many_above: usize,
    pub few_below: usize,
}

impl ShotSplit {
    pub fn convention(&self) -> String {
        format!(
            "many: n > {m}; medium: {f} <= n <= {m}; few: n < {f}",
            m = self.many_above,
            f = self.few_below
        )
    }
}

/// Default thresholds: `(100, 20)`, or `(n_max/5, n_max/25)` when
/// `n_max < 200`.
pub fn default_shot_thresholds(counts: &ClassCounts) -> (usize, usize) {
    let n_max = counts.n_max();
    if n_max < 200 {
        (n_max / 5, n_max / 25)
    } else {
        (100, 20)
    }
}

pub fn shot_split(counts: &ClassCounts, thresholds: (usize, usize)) -> Result<ShotSplit> {
    let (many_above, few_below) = thresholds;
    if few_below > many_above {
        return Err(Error::Config(format!(
            "shot thresholds must be descending, got ({many_above}, {few_below})"
        )));
    }
    let buckets = counts
        .as_slice()
        .iter()
        .map(|&n| {
            if n > many_above {
                Shot::Many
            } else if n < few_below {
                Shot::Few
            } else {
                Shot::Medium
            }
        })
        .collect();
    Ok(ShotSplit {
        buckets,
        many_above,
        few_below,
    })
}
