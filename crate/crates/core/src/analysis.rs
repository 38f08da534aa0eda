//! FLOPs accounting, merge/prune surgery, activation reports and the random-selection baseline.
//!
//! A multiply-add counts as 2 FLOPs everywhere. Base costs count matrix products only;
//! normalization, softmax and activation functions are left out.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterKind;
use crate::error::{Error, Result};
use crate::model::{enumerate_sites, ModelConfig, SiteId, SiteKind, VisionTransformer};
use crate::train::{finetune, RunConfig, RunResult};

/// Extra cost of one unmerged LoRA block on `tokens` rows: `x·a` then `(x·a)·b`.
pub fn adapter_flops(m: u64, n: u64, r: u64, tokens: u64) -> u64 {
    2 * r * (m + n) * tokens
}

/// Unmerged DoRA additionally forms the rescaled weight (`3mn`) and applies it densely.
pub fn dora_adapter_flops(m: u64, n: u64, r: u64, tokens: u64) -> u64 {
    adapter_flops(m, n, r, tokens) + 2 * m * n * tokens + 3 * m * n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopsMode {
    Unmerged,
    Merged,
}

/// What the cost model needs to know about one attached block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockCost {
    pub site: SiteId,
    pub kind: AdapterKind,
    pub rank: usize,
    pub active: bool,
}

pub fn block_costs(model: &VisionTransformer) -> Vec<BlockCost> {
    model
        .adapters
        .values()
        .map(|b| BlockCost {
            site: b.site,
            kind: b.kind,
            rank: b.rank(),
            active: b.gate.is_active(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub mode: FlopsMode,
    pub tokens: u64,
    pub base_flops: u64,
    /// Extra cost of each active block, in site order.
    pub adapter_flops: Vec<(SiteId, u64)>,
    pub active_count: usize,
    pub total_sites: usize,
    pub total: u64,
    /// Adapter cost with every attached block switched on.
    pub ungated_adapter_flops: u64,
    /// `ungated / gated` adapter cost; `None` when no block is active.
    pub ungated_over_gated: Option<f64>,
}

/// Matrix-product FLOPs of one forward pass over a sequence of `tokens` rows
/// (class token included), for a single image.
pub fn base_flops(cfg: &ModelConfig, tokens: u64) -> u64 {
    let d = cfg.dim as u64;
    let hid = cfg.hidden() as u64;
    let patches = tokens.saturating_sub(1);
    let embed = 2 * patches * cfg.patch_dim() as u64 * d;
    let projections = 4 * 2 * tokens * d * d;
    let attention = 2 * 2 * tokens * tokens * d;
    let mlp = 2 * 2 * tokens * d * hid;
    let head = 2 * d * cfg.num_classes as u64;
    embed + cfg.layers as u64 * (projections + attention + mlp) + head
}

fn block_flops(cfg: &ModelConfig, b: &BlockCost, tokens: u64) -> u64 {
    let (m, n) = cfg.site_shape(b.site.kind);
    let (m, n, r) = (m as u64, n as u64, b.rank as u64);
    match b.kind {
        AdapterKind::Lora => adapter_flops(m, n, r, tokens),
        AdapterKind::Dora => dora_adapter_flops(m, n, r, tokens),
    }
}

pub fn model_flops_report(cfg: &ModelConfig, blocks: &[BlockCost], mode: FlopsMode, tokens: u64) -> FlopsReport {
    let base = base_flops(cfg, tokens);
    let unmerged = mode == FlopsMode::Unmerged;
    let adapter: Vec<(SiteId, u64)> = blocks
        .iter()
        .filter(|b| b.active && unmerged)
        .map(|b| (b.site, block_flops(cfg, b, tokens)))
        .collect();
    let gated: u64 = adapter.iter().map(|(_, f)| f).sum();
    let ungated: u64 = if unmerged {
        blocks.iter().map(|b| block_flops(cfg, b, tokens)).sum()
    } else {
        0
    };
    FlopsReport {
        mode,
        tokens,
        base_flops: base,
        active_count: blocks.iter().filter(|b| b.active).count(),
        total_sites: 6 * cfg.layers,
        total: base + gated,
        adapter_flops: adapter,
        ungated_adapter_flops: ungated,
        ungated_over_gated: (gated > 0).then(|| ungated as f64 / gated as f64),
    }
}

/// Total unmerged FLOPs for each rank with the same active set.
pub fn rank_curve(cfg: &ModelConfig, blocks: &[BlockCost], ranks: &[usize], tokens: u64) -> Vec<(usize, u64)> {
    ranks
        .iter()
        .map(|&r| {
            let at_rank: Vec<BlockCost> = blocks.iter().map(|b| BlockCost { rank: r, ..*b }).collect();
            (r, model_flops_report(cfg, &at_rank, FlopsMode::Unmerged, tokens).total)
        })
        .collect()
}

/// Fold every active block into its base weight and drop all adapters.
pub fn merge_adapters(model: &VisionTransformer) -> Result<VisionTransformer> {
    let mut out = model.clone();
    let blocks = std::mem::take(&mut out.adapters);
    for (site, blk) in blocks {
        if blk.gate.is_active() {
            let merged = blk.effective_weight(out.site_weight(site))?;
            *out.site_weight_mut(site) = merged;
        }
    }
    Ok(out)
}

/// Drop blocks whose gate is off; the forward pass is unchanged.
pub fn prune_inactive(model: &VisionTransformer) -> VisionTransformer {
    let mut out = model.clone();
    out.adapters.retain(|_, b| b.gate.is_active());
    out
}

/// Fraction of runs in which each site ended active: `grid[kind][layer]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationReport {
    pub layers: usize,
    pub runs: usize,
    pub grid: Vec<Vec<f64>>,
}

/// Each run is the list of `(site, active)` pairs of its final gates.
pub fn activation_report(runs: &[Vec<(SiteId, bool)>]) -> Result<ActivationReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::contract("activation report needs at least one run"))?;
    let sites: Vec<SiteId> = first.iter().map(|(s, _)| *s).collect();
    let layers = sites.iter().map(|s| s.layer + 1).max().unwrap_or(0);
    let mut counts = vec![vec![0usize; layers]; SiteKind::ALL.len()];
    for (i, run) in runs.iter().enumerate() {
        let these: Vec<SiteId> = run.iter().map(|(s, _)| *s).collect();
        if these != sites {
            return Err(Error::contract(format!(
                "run {i} has a different site layout from run 0"
            )));
        }
        for (s, active) in run {
            if *active {
                counts[s.kind.index()][s.layer] += 1;
            }
        }
    }
    let n = runs.len() as f64;
    Ok(ActivationReport {
        layers,
        runs: runs.len(),
        grid: counts
            .into_iter()
            .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
            .collect(),
    })
}

impl ActivationReport {
    pub fn cell(&self, kind: SiteKind, layer: usize) -> f64 {
        self.grid[kind.index()][layer]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("site");
        for l in 0..self.layers {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for kind in SiteKind::ALL {
            out.push_str(kind.as_str());
            for v in &self.grid[kind.index()] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Heatmap with one shaded square per cell; darker means more often active.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 40;
        const LEFT: usize = 60;
        const TOP: usize = 30;
        let width = LEFT + CELL * self.layers + 10;
        let height = TOP + CELL * SiteKind::ALL.len() + 10;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        );
        for l in 0..self.layers {
            let x = LEFT + l * CELL + CELL / 2;
            let _ = writeln!(s, r#"  <text x="{x}" y="{}" text-anchor="middle">{l}</text>"#, TOP - 10);
        }
        for kind in SiteKind::ALL {
            let row = kind.index();
            let y = TOP + row * CELL;
            let _ = writeln!(
                s,
                r#"  <text x="{}" y="{}" text-anchor="end">{}</text>"#,
                LEFT - 6,
                y + CELL / 2 + 4,
                kind.as_str()
            );
            for (l, v) in self.grid[row].iter().enumerate() {
                let shade = 255 - (v * 255.0).round() as u8;
                let _ = writeln!(
                    s,
                    r#"  <rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="white"><title>{} layer {l}: {v}</title></rect>"#,
                    LEFT + l * CELL,
                    kind.as_str()
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Sites chosen uniformly without replacement, returned in site order.
pub fn random_sites(cfg: &ModelConfig, n_active: usize, seed: u64) -> Result<Vec<SiteId>> {
    let all = enumerate_sites(cfg);
    if n_active > all.len() {
        return Err(Error::contract(format!(
            "cannot activate {n_active} of {} sites",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.len(), n_active).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i]).collect())
}

/// Train with `n_active` randomly chosen blocks pinned on, the rest off, and no penalty.
pub fn random_selection_baseline(
    n_active: usize,
    seed: u64,
    run: &RunConfig,
    init: &VisionTransformer,
) -> Result<(RunResult, RunConfig)> {
    let mut cfg = run.clone();
    cfg.fixed_gates = Some(random_sites(&init.cfg, n_active, seed)?);
    cfg.reg.lambda = 0.0;
    cfg.seed = seed;
    let result = finetune(&cfg, init)?;
    Ok((result, cfg))
}
