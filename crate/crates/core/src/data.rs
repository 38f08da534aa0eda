//! Synthetic grating benchmark, IDX image files, and the accuracy metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images `[N, c, H, W]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: &str, split: &str) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::data(format!(
                "images must be [N, c, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Length {
                expected: images.shape()[0],
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            name: name.to_string(),
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gather the given rows into a new batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    what: "dataset row",
                    index: i,
                    limit: self.len(),
                });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Oriented-grating dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub domain: Domain,
    pub orientation_offset: f64,
    /// Spatial frequency band in cycles per image.
    pub freq_band: (f64, f64),
    pub noise: f64,
    pub seed: u64,
    pub split: String,
}

impl SynthSpec {
    pub fn source(num_classes: usize, samples_per_class: usize, image_size: usize, noise: f64, seed: u64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            image_size,
            domain: Domain::Source,
            orientation_offset: 0.0,
            freq_band: (2.0, 3.0),
            noise,
            seed,
            split: "train".into(),
        }
    }

    pub fn target(num_classes: usize, samples_per_class: usize, image_size: usize, noise: f64, seed: u64) -> Self {
        Self {
            domain: Domain::Target,
            orientation_offset: PI / 16.0,
            freq_band: (4.0, 6.0),
            ..Self::source(num_classes, samples_per_class, image_size, noise, seed)
        }
    }

    pub fn with_split(mut self, split: &str) -> Self {
        self.split = split.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.image_size == 0 {
            return Err(Error::config("synthetic dataset needs classes, samples and size > 0"));
        }
        let (lo, hi) = self.freq_band;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(format!("bad frequency band ({lo}, {hi})")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("bad noise level {}", self.noise)));
        }
        Ok(())
    }

    pub fn orientation(&self, class: usize) -> f64 {
        class as f64 * PI / self.num_classes as f64 + self.orientation_offset
    }

    /// Classes are spread evenly across the band, one frequency per class.
    pub fn frequency(&self, class: usize) -> f64 {
        let (lo, hi) = self.freq_band;
        lo + (hi - lo) * (class as f64 + 0.5) / self.num_classes as f64
    }

    fn rng_seed(&self) -> u64 {
        let split = self.split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        });
        let domain = match self.domain {
            Domain::Source => 0x5eed_0001,
            Domain::Target => 0x5eed_0002,
        };
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ split ^ domain
    }
}

/// Row `n` holds class `n % num_classes`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let n = spec.num_classes * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed());
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let class = row % spec.num_classes;
        let (theta, freq) = (spec.orientation(class), spec.frequency(class));
        let (c, sn) = (theta.cos(), theta.sin());
        for i in 0..s {
            let v = (i as f64 + 0.5) / s as f64;
            for j in 0..s {
                let u = (j as f64 + 0.5) / s as f64;
                let mut px = (2.0 * PI * freq * (u * c + v * sn)).sin();
                if spec.noise > 0.0 {
                    px += normal.sample(&mut rng);
                }
                data.push(px);
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, s, s], data)?;
    Dataset::new(images, labels, spec.num_classes, spec.domain.as_str(), &spec.split)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let chunk = bytes.get(at..at + 4).ok_or(Error::Length {
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

/// Parse an IDX image file into `[N, 1, H, W]` with pixels scaled to `[0, 1]`.
pub fn idx_parse_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn idx_parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let payload = bytes.get(8..8 + n).ok_or(Error::Length {
        expected: 8 + n,
        found: bytes.len(),
    })?;
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Load a pair of IDX files. The class count is one past the largest label.
pub fn idx_load(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = idx_parse_images(&fs::read(images)?)?;
    let labs = idx_parse_labels(&fs::read(labels)?)?;
    if labs.len() != imgs.shape()[0] {
        return Err(Error::Length {
            expected: imgs.shape()[0],
            found: labs.len(),
        });
    }
    let classes = labs.iter().max().map_or(1, |&m| m + 1);
    let name = images.file_stem().and_then(|s| s.to_str()).unwrap_or("idx");
    Dataset::new(imgs, labs, classes, name, "file")
}

/// Encode single-channel images (values clamped to `[0, 1]`, rounded to u8).
pub fn idx_encode_images(images: &Tensor) -> Result<Vec<u8>> {
    let sh = images.shape();
    if sh.len() != 4 || sh[1] != 1 {
        return Err(Error::data(format!("IDX images must be [N, 1, H, W], got {sh:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.numel());
    for v in [IDX_IMAGES_MAGIC, sh[0] as u32, sh[2] as u32, sh[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn idx_encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::data(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

pub fn idx_write(images_path: &Path, labels_path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(images_path, idx_encode_images(&ds.images)?)?;
    fs::write(labels_path, idx_encode_labels(&ds.labels)?)?;
    Ok(())
}

/// Fraction of rows whose argmax (first maximum on ties) equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.ndim() != 2 || logits.rows() != labels.len() {
        return Err(Error::Length {
            expected: labels.len(),
            found: logits.shape().first().copied().unwrap_or(0),
        });
    }
    let c = logits.last_dim();
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn l2_normalize_rows(t: &Tensor) -> Vec<f64> {
    let d = t.last_dim();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Cosine k-nearest-neighbour classification accuracy with an unweighted vote.
///
/// Neighbours with equal similarity are ordered by training index; vote ties go
/// to the lowest class id.
pub fn knn_eval(
    train_emb: &Tensor,
    train_lab: &[usize],
    test_emb: &Tensor,
    test_lab: &[usize],
    k: usize,
) -> Result<f64> {
    let n = train_emb.rows();
    if train_emb.ndim() != 2 || test_emb.ndim() != 2 || train_emb.last_dim() != test_emb.last_dim() {
        return Err(Error::dim("knn_eval", train_emb.shape(), test_emb.shape()));
    }
    if train_lab.len() != n || test_lab.len() != test_emb.rows() {
        return Err(Error::contract("knn_eval: labels do not match embedding rows"));
    }
    if k == 0 || k > n {
        return Err(Error::contract(format!("knn_eval: k={k} must be in 1..={n}")));
    }
    let d = train_emb.last_dim();
    let train = l2_normalize_rows(train_emb);
    let test = l2_normalize_rows(test_emb);
    let classes = train_lab.iter().max().map_or(0, |&m| m + 1);
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut votes = vec![0usize; classes];
    let mut hits = 0;
    for (q, &truth) in test.chunks(d).zip(test_lab) {
        sims.clear();
        sims.extend(
            train
                .chunks(d)
                .enumerate()
                .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), i)),
        );
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < n {
            sims.select_nth_unstable_by(k - 1, by_rank);
        }
        votes.iter_mut().for_each(|v| *v = 0);
        for &(_, i) in &sims[..k] {
            votes[train_lab[i]] += 1;
        }
        let mut pred = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[pred] {
                pred = c;
            }
        }
        if pred == truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_lab.len() as f64)
}

/// Resolve a dataset address.
///
/// * `synth:source?seed=1&split=val&n=64&noise=0.3` (also `synth:target`); image size
///   and class count come from `cfg`.
/// * `idx:path/to/images?labels=path/to/labels`
pub fn resolve_dataset(uri: &str, cfg: &ModelConfig) -> Result<Dataset> {
    let (scheme, rest) = uri
        .split_once(':')
        .ok_or_else(|| Error::data(format!("dataset address without scheme: {uri}")))?;
    let (path, query) = rest.split_once('?').unwrap_or((rest, ""));
    let params = parse_query(query)?;
    match scheme {
        "synth" => {
            let get = |k: &str| params.get(k).map(String::as_str);
            let num = |k: &str, default: f64| -> Result<f64> {
                get(k).map_or(Ok(default), |v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::data(format!("bad value for {k}: {v}")))
                })
            };
            let seed = num("seed", 0.0)? as u64;
            let n = num("n", 64.0)? as usize;
            let noise = num("noise", DEFAULT_NOISE)?;
            let spec = match path {
                "source" => SynthSpec::source(cfg.num_classes, n, cfg.image_size, noise, seed),
                "target" => SynthSpec::target(cfg.num_classes, n, cfg.image_size, noise, seed),
                other => return Err(Error::data(format!("unknown synthetic domain {other}"))),
            };
            let spec = spec.with_split(get("split").unwrap_or("train"));
            if let Some(k) = params
                .keys()
                .find(|k| !["seed", "n", "noise", "split"].contains(&k.as_str()))
            {
                return Err(Error::data(format!("unknown synthetic parameter {k}")));
            }
            if cfg.channels != 1 {
                return Err(Error::data("synthetic gratings are single-channel"));
            }
            synth_generate(&spec).map_err(|e| Error::data(e.to_string()))
        }
        "idx" => {
            let labels = params
                .get("labels")
                .ok_or_else(|| Error::data("idx address needs ?labels=<path>"))?;
            idx_load(Path::new(path), Path::new(labels)).map_err(|e| match e {
                Error::Io(io) => Error::data(format!("{path}: {io}")),
                other => other,
            })
        }
        other => Err(Error::data(format!("unknown dataset scheme {other}"))),
    }
}

pub const DEFAULT_NOISE: f64 = 0.3;

fn parse_query(query: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::data(format!("malformed query pair {pair}")))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}
