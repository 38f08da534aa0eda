//! Pre-norm vision transformer with six adapter sites per layer.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{record_gated, AdapterApply, AdapterBlock, AdapterKind, AdapterVars, GateMode, GateState};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    #[serde(rename = "q")]
    Q,
    #[serde(rename = "k")]
    K,
    #[serde(rename = "v")]
    V,
    /// Attention output projection.
    #[serde(rename = "mlp_1")]
    Mlp1,
    /// Feed-forward expansion.
    #[serde(rename = "mlp_2")]
    Mlp2,
    /// Feed-forward contraction.
    #[serde(rename = "mlp_3")]
    Mlp3,
}

impl SiteKind {
    pub const ALL: [SiteKind; 6] = [
        SiteKind::Q,
        SiteKind::K,
        SiteKind::V,
        SiteKind::Mlp1,
        SiteKind::Mlp2,
        SiteKind::Mlp3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Q => "q",
            SiteKind::K => "k",
            SiteKind::V => "v",
            SiteKind::Mlp1 => "mlp_1",
            SiteKind::Mlp2 => "mlp_2",
            SiteKind::Mlp3 => "mlp_3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One adapter insertion point. Ordered layer-major, then by kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.kind.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            dim: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 4,
            num_classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.dim,
            self.heads,
            self.layers,
            self.mlp_ratio,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patch tokens per image, excluding the class token.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// `(in, out)` extents of the weight at a site.
    pub fn site_shape(&self, kind: SiteKind) -> (usize, usize) {
        match kind {
            SiteKind::Q | SiteKind::K | SiteKind::V | SiteKind::Mlp1 => (self.dim, self.dim),
            SiteKind::Mlp2 => (self.dim, self.hidden()),
            SiteKind::Mlp3 => (self.hidden(), self.dim),
        }
    }
}

/// All adapter sites, layer-major in kind order `q, k, v, mlp_1, mlp_2, mlp_3`.
pub fn enumerate_sites(cfg: &ModelConfig) -> Vec<SiteId> {
    (0..cfg.layers)
        .flat_map(|l| SiteKind::ALL.into_iter().map(move |k| SiteId::new(l, k)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    fn linear(&self, kind: SiteKind) -> &Linear {
        match kind {
            SiteKind::Q => &self.q,
            SiteKind::K => &self.k,
            SiteKind::V => &self.v,
            SiteKind::Mlp1 => &self.proj,
            SiteKind::Mlp2 => &self.fc1,
            SiteKind::Mlp3 => &self.fc2,
        }
    }

    fn linear_mut(&mut self, kind: SiteKind) -> &mut Linear {
        match kind {
            SiteKind::Q => &mut self.q,
            SiteKind::K => &mut self.k,
            SiteKind::V => &mut self.v,
            SiteKind::Mlp1 => &mut self.proj,
            SiteKind::Mlp2 => &mut self.fc1,
            SiteKind::Mlp3 => &mut self.fc2,
        }
    }
}

/// Which parameter groups are bound as trainable leaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainScope {
    pub trunk: bool,
    pub head: bool,
    pub adapters: bool,
    pub scores: bool,
}

impl TrainScope {
    pub const NONE: TrainScope = TrainScope {
        trunk: false,
        head: false,
        adapters: false,
        scores: false,
    };
    /// Full supervised training without adapters.
    pub const PRETRAIN: TrainScope = TrainScope {
        trunk: true,
        head: true,
        adapters: false,
        scores: false,
    };
    /// Frozen trunk; head, adapters and trainable gate scores update.
    pub const FINETUNE: TrainScope = TrainScope {
        trunk: false,
        head: true,
        adapters: true,
        scores: true,
    };
    pub const ALL: TrainScope = TrainScope {
        trunk: true,
        head: true,
        adapters: true,
        scores: true,
    };
}

/// Identifies a trainable quantity bound into a graph.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRef {
    Tensor(String),
    Score(SiteId),
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Final-normed class token, the representation used for K-NN evaluation.
    pub embedding: Var,
    pub bindings: Vec<(ParamRef, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub site: SiteId,
    pub score: f64,
    pub active: bool,
}

/// Small ViT classifier with optional gated adapters at any of its `6·layers` sites.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer {
    pub cfg: ModelConfig,
    pub patch: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head: Linear,
    pub adapters: BTreeMap<SiteId, AdapterBlock>,
}

/// Cut `[b, c, H, W]` images into row-major non-overlapping patches: `[(b·P), c·ps·ps]`.
pub fn patchify(images: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let s = images.shape();
    let want = [
        s.first().copied().unwrap_or(0),
        cfg.channels,
        cfg.image_size,
        cfg.image_size,
    ];
    if s.len() != 4 || s[1..] != want[1..] {
        return Err(Error::dim("patch_embed", s, &want));
    }
    let (b, c, hw, ps) = (s[0], cfg.channels, cfg.image_size, cfg.patch_size);
    let side = hw / ps;
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; b * side * side * pd];
    let src = images.data();
    for n in 0..b {
        for py in 0..side {
            for px in 0..side {
                let row = (n * side + py) * side + px;
                let dst = &mut out[row * pd..(row + 1) * pd];
                let mut k = 0;
                for ch in 0..c {
                    for dy in 0..ps {
                        let y = py * ps + dy;
                        let base = ((n * c + ch) * hw + y) * hw + px * ps;
                        dst[k..k + ps].copy_from_slice(&src[base..base + ps]);
                        k += ps;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * side * side, pd], out)
}

struct Binder<'a> {
    g: &'a mut Graph,
    scope: TrainScope,
    bindings: Vec<(ParamRef, Var)>,
}

impl Binder<'_> {
    fn bind(&mut self, name: String, t: &Tensor, trainable: bool) -> Var {
        let trainable = trainable && self.g.grad_enabled();
        let v = self.g.leaf(t.clone(), trainable);
        if trainable {
            self.bindings.push((ParamRef::Tensor(name), v));
        }
        v
    }

    fn trunk(&mut self, name: String, t: &Tensor) -> Var {
        let s = self.scope.trunk;
        self.bind(name, t, s)
    }
}

impl VisionTransformer {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayer {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                q: Linear::init(d, d, rng),
                k: Linear::init(d, d, rng),
                v: Linear::init(d, d, rng),
                proj: Linear::init(d, d, rng),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                fc1: Linear::init(d, cfg.hidden(), rng),
                fc2: Linear::init(cfg.hidden(), d, rng),
            })
            .collect();
        Ok(Self {
            patch: Linear::init(cfg.patch_dim(), d, rng),
            cls_token: Tensor::randn(&[d], 0.02, rng),
            pos_embed: Tensor::randn(&[cfg.tokens(), d], 0.02, rng),
            layers,
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
            head: Linear::init(d, cfg.num_classes, rng),
            adapters: BTreeMap::new(),
            cfg,
        })
    }

    pub fn site_weight(&self, site: SiteId) -> &Tensor {
        &self.layers[site.layer].linear(site.kind).weight
    }

    pub fn site_weight_mut(&mut self, site: SiteId) -> &mut Tensor {
        &mut self.layers[site.layer].linear_mut(site.kind).weight
    }

    /// Attach a fresh block at each listed site, replacing any existing one.
    #[allow(clippy::too_many_arguments)]
    pub fn attach_adapters<R: Rng + ?Sized>(
        &mut self,
        sites: &[SiteId],
        kind: AdapterKind,
        rank: usize,
        alpha: f64,
        gate: GateState,
        rng: &mut R,
    ) -> Result<()> {
        for &site in sites {
            if site.layer >= self.cfg.layers {
                return Err(Error::Index {
                    what: "layer",
                    index: site.layer,
                    limit: self.cfg.layers,
                });
            }
            let blk = AdapterBlock::init(site, kind, self.site_weight(site), rank, alpha, gate, rng)?;
            self.adapters.insert(site, blk);
        }
        Ok(())
    }

    pub fn detach_adapters(&mut self) {
        self.adapters.clear();
    }

    pub fn gate_snapshot(&self) -> Vec<GateRecord> {
        self.adapters
            .values()
            .map(|b| GateRecord {
                site: b.site,
                score: b.gate.score,
                active: b.gate.is_active(),
            })
            .collect()
    }

    pub fn gates(&self) -> Vec<GateState> {
        self.adapters.values().map(|b| b.gate).collect()
    }

    pub fn is_trunk_name(name: &str) -> bool {
        !name.starts_with("head.") && !name.starts_with("adapters.")
    }

    /// Every tensor of the model in a fixed order: trunk, head, then adapter tensors.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch.weight".into(), &self.patch.weight),
            ("patch.bias".into(), &self.patch.bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gamma"), &l.ln1_gamma));
            out.push((format!("layers.{i}.ln1.beta"), &l.ln1_beta));
            for kind in SiteKind::ALL {
                let lin = l.linear(kind);
                out.push((format!("layers.{i}.{}.weight", kind.as_str()), &lin.weight));
                out.push((format!("layers.{i}.{}.bias", kind.as_str()), &lin.bias));
            }
            out.push((format!("layers.{i}.ln2.gamma"), &l.ln2_gamma));
            out.push((format!("layers.{i}.ln2.beta"), &l.ln2_beta));
        }
        out.push(("norm.gamma".into(), &self.norm_gamma));
        out.push(("norm.beta".into(), &self.norm_beta));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        for (site, blk) in &self.adapters {
            out.push((format!("adapters.{site}.a"), &blk.a));
            out.push((format!("adapters.{site}.b"), &blk.b));
            if let Some(m) = &blk.magnitude {
                out.push((format!("adapters.{site}.magnitude"), m));
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["patch", "weight"] => Some(&mut self.patch.weight),
            ["patch", "bias"] => Some(&mut self.patch.bias),
            ["cls_token"] => Some(&mut self.cls_token),
            ["pos_embed"] => Some(&mut self.pos_embed),
            ["norm", "gamma"] => Some(&mut self.norm_gamma),
            ["norm", "beta"] => Some(&mut self.norm_beta),
            ["head", "weight"] => Some(&mut self.head.weight),
            ["head", "bias"] => Some(&mut self.head.bias),
            ["layers", i, rest @ ..] => {
                let l = self.layers.get_mut(i.parse::<usize>().ok()?)?;
                match rest {
                    ["ln1", "gamma"] => Some(&mut l.ln1_gamma),
                    ["ln1", "beta"] => Some(&mut l.ln1_beta),
                    ["ln2", "gamma"] => Some(&mut l.ln2_gamma),
                    ["ln2", "beta"] => Some(&mut l.ln2_beta),
                    [kind, "weight"] => Some(&mut l.linear_mut(SiteKind::parse(kind)?).weight),
                    [kind, "bias"] => Some(&mut l.linear_mut(SiteKind::parse(kind)?).bias),
                    _ => None,
                }
            }
            ["adapters", layer, kind, field] => {
                let site = SiteId::new(layer.parse().ok()?, SiteKind::parse(kind)?);
                let blk = self.adapters.get_mut(&site)?;
                match *field {
                    "a" => Some(&mut blk.a),
                    "b" => Some(&mut blk.b),
                    "magnitude" => blk.magnitude.as_mut(),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    pub fn score_mut(&mut self, site: SiteId) -> Option<&mut f64> {
        self.adapters.get_mut(&site).map(|b| &mut b.gate.score)
    }

    /// Apply the weight at `site` (gated if an adapter is attached) and add its bias.
    #[allow(clippy::too_many_arguments)]
    fn site_linear(&self, bd: &mut Binder<'_>, x: Var, site: SiteId, mode: GateMode) -> Result<Var> {
        let lin = self.layers[site.layer].linear(site.kind);
        let prefix = format!("layers.{}.{}", site.layer, site.kind.as_str());
        let adapted = self.adapters.contains_key(&site);
        let wt = bd.scope.trunk && !adapted;
        let w = bd.bind(format!("{prefix}.weight"), &lin.weight, wt);
        let bias = bd.trunk(format!("{prefix}.bias"), &lin.bias);
        let y = match self.adapters.get(&site) {
            None => bd.g.matmul(x, w)?,
            Some(blk) => {
                let ad = bd.scope.adapters;
                let vars = AdapterVars {
                    a: bd.bind(format!("adapters.{site}.a"), &blk.a, ad),
                    b: bd.bind(format!("adapters.{site}.b"), &blk.b, ad),
                    magnitude: blk
                        .magnitude
                        .as_ref()
                        .map(|m| bd.bind(format!("adapters.{site}.magnitude"), m, ad)),
                    score: {
                        let trainable = bd.scope.scores && blk.gate.trainable && bd.g.grad_enabled();
                        let v = bd.g.leaf(Tensor::scalar(blk.gate.score), trainable);
                        if trainable {
                            bd.bindings.push((ParamRef::Score(site), v));
                        }
                        Some(v)
                    },
                };
                let apply = AdapterApply {
                    kind: blk.kind,
                    scale: blk.scale(),
                    gate_on: blk.gate.is_active(),
                    mode,
                };
                record_gated(bd.g, x, w, vars, apply)?
            }
        };
        bd.g.add(y, bias)
    }

    fn attention_inner(
        &self,
        bd: &mut Binder<'_>,
        x: Var,
        batch: usize,
        tokens: usize,
        layer: usize,
        mode: GateMode,
    ) -> Result<Var> {
        let l = &self.layers[layer];
        let g1 = bd.trunk(format!("layers.{layer}.ln1.gamma"), &l.ln1_gamma);
        let b1 = bd.trunk(format!("layers.{layer}.ln1.beta"), &l.ln1_beta);
        let h = bd.g.layer_norm(x, g1, b1, LN_EPS)?;
        let q = self.site_linear(bd, h, SiteId::new(layer, SiteKind::Q), mode)?;
        let k = self.site_linear(bd, h, SiteId::new(layer, SiteKind::K), mode)?;
        let v = self.site_linear(bd, h, SiteId::new(layer, SiteKind::V), mode)?;
        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let qh = bd.g.split_heads(q, batch, tokens, heads)?;
        let kh = bd.g.split_heads(k, batch, tokens, heads)?;
        let vh = bd.g.split_heads(v, batch, tokens, heads)?;
        let scores = bd.g.batch_matmul(qh, kh, true)?;
        let scores = bd.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = bd.g.softmax(scores);
        let ctx = bd.g.batch_matmul(attn, vh, false)?;
        let merged = bd.g.merge_heads(ctx, batch, tokens, heads)?;
        let out = self.site_linear(bd, merged, SiteId::new(layer, SiteKind::Mlp1), mode)?;
        bd.g.add(x, out)
    }

    fn mlp_inner(&self, bd: &mut Binder<'_>, x: Var, layer: usize, mode: GateMode) -> Result<Var> {
        let l = &self.layers[layer];
        let g2 = bd.trunk(format!("layers.{layer}.ln2.gamma"), &l.ln2_gamma);
        let b2 = bd.trunk(format!("layers.{layer}.ln2.beta"), &l.ln2_beta);
        let h = bd.g.layer_norm(x, g2, b2, LN_EPS)?;
        let u = self.site_linear(bd, h, SiteId::new(layer, SiteKind::Mlp2), mode)?;
        let u = bd.g.gelu(u);
        let o = self.site_linear(bd, u, SiteId::new(layer, SiteKind::Mlp3), mode)?;
        bd.g.add(x, o)
    }

    /// Pre-norm self-attention sublayer with residual; `x` is `[(batch·tokens), dim]`.
    pub fn attention_block(&self, g: &mut Graph, x: Var, batch: usize, tokens: usize, layer: usize) -> Result<Var> {
        let mut bd = Binder {
            g,
            scope: TrainScope::NONE,
            bindings: Vec::new(),
        };
        self.attention_inner(&mut bd, x, batch, tokens, layer, GateMode::default())
    }

    /// Pre-norm feed-forward sublayer with residual.
    pub fn mlp_block(&self, g: &mut Graph, x: Var, layer: usize) -> Result<Var> {
        let mut bd = Binder {
            g,
            scope: TrainScope::NONE,
            bindings: Vec::new(),
        };
        self.mlp_inner(&mut bd, x, layer, GateMode::default())
    }

    /// Patch projection, class token and positional embedding: `[(b·(P+1)), dim]`.
    pub fn patch_embed(&self, g: &mut Graph, images: &Tensor) -> Result<Var> {
        let mut bd = Binder {
            g,
            scope: TrainScope::NONE,
            bindings: Vec::new(),
        };
        self.embed_inner(&mut bd, images)
    }

    fn embed_inner(&self, bd: &mut Binder<'_>, images: &Tensor) -> Result<Var> {
        let patches = patchify(images, &self.cfg)?;
        let batch = images.shape()[0];
        let p = bd.g.constant(patches);
        let w = bd.trunk("patch.weight".into(), &self.patch.weight);
        let b = bd.trunk("patch.bias".into(), &self.patch.bias);
        let proj = bd.g.matmul(p, w)?;
        let proj = bd.g.add(proj, b)?;
        let cls = bd.trunk("cls_token".into(), &self.cls_token);
        let pos = bd.trunk("pos_embed".into(), &self.pos_embed);
        bd.g.assemble_tokens(proj, cls, pos, batch)
    }

    pub fn forward(&self, g: &mut Graph, images: &Tensor, scope: TrainScope, mode: GateMode) -> Result<ForwardOutput> {
        let batch = images.shape().first().copied().unwrap_or(0);
        let tokens = self.cfg.tokens();
        let mut bd = Binder {
            g,
            scope,
            bindings: Vec::new(),
        };
        let mut x = self.embed_inner(&mut bd, images)?;
        for layer in 0..self.cfg.layers {
            x = self.attention_inner(&mut bd, x, batch, tokens, layer, mode)?;
            x = self.mlp_inner(&mut bd, x, layer, mode)?;
        }
        let ng = bd.trunk("norm.gamma".into(), &self.norm_gamma);
        let nb = bd.trunk("norm.beta".into(), &self.norm_beta);
        let x = bd.g.layer_norm(x, ng, nb, LN_EPS)?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
        let embedding = bd.g.select_rows(x, &cls_rows)?;
        let hs = scope.head;
        let hw = bd.bind("head.weight".into(), &self.head.weight, hs);
        let hb = bd.bind("head.bias".into(), &self.head.bias, hs);
        let logits = bd.g.matmul(embedding, hw)?;
        let logits = bd.g.add(logits, hb)?;
        Ok(ForwardOutput {
            logits,
            embedding,
            bindings: bd.bindings,
        })
    }

    /// Inference in chunks: returns `(logits [N, classes], embeddings [N, dim])`.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
        let n = images.shape()[0];
        let per = images.numel() / n;
        let chunk = chunk.max(1);
        let mut logits = Vec::with_capacity(n * self.cfg.num_classes);
        let mut emb = Vec::with_capacity(n * self.cfg.dim);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::no_grad();
            let out = self.forward(&mut g, &part, TrainScope::NONE, GateMode::default())?;
            logits.extend_from_slice(g.value(out.logits).data());
            emb.extend_from_slice(g.value(out.embedding).data());
            start = end;
        }
        Ok((
            Tensor::new(vec![n, self.cfg.num_classes], logits)?,
            Tensor::new(vec![n, self.cfg.dim], emb)?,
        ))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.predict(images, 64)?.0)
    }
}
