//! Run configuration, the pretraining and fine-tuning loops, and metric logging.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    active_fraction, regularizer_value, AdapterKind, GateMode, GateState, RegularizerSpec, DEFAULT_SCORE_INIT,
    DEFAULT_TAU,
};
use crate::autodiff::Graph;
use crate::data::{knn_eval, resolve_dataset, top1_accuracy, Dataset};
use crate::error::{Error, Result};
use crate::model::{enumerate_sites, ModelConfig, ParamRef, SiteId, TrainScope, VisionTransformer};
use crate::optim::{cosine_warmup_lr, OptimSpec, OptimState, Optimizer, ScheduleSpec};

pub const METRICS_HEADER: &str = "step,lr,task_loss,reg_loss,val_acc,active_pct";
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    #[serde(default = "default_kind")]
    pub kind: AdapterKind,
    pub rank: usize,
    /// Defaults to the rank, giving a unit scale.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_s_init")]
    pub s_init: f64,
}

fn default_kind() -> AdapterKind {
    AdapterKind::Lora
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_s_init() -> f64 {
    DEFAULT_SCORE_INIT
}

impl AdapterConfig {
    pub fn lora(rank: usize) -> Self {
        Self {
            kind: AdapterKind::Lora,
            rank,
            alpha: None,
            tau: DEFAULT_TAU,
            s_init: DEFAULT_SCORE_INIT,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: String,
    pub val: String,
    /// Held-out source data for the retention measurement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention_train: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention_val: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    BestVal,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// Absent for pretraining.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    #[serde(default = "default_reg")]
    pub reg: RegularizerSpec,
    #[serde(default = "default_optim")]
    pub optim: OptimSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default = "default_selection")]
    pub selection: Selection,
    /// Separate peak learning rate for gate scores; the schedule shape is shared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_lr: Option<f64>,
    #[serde(default = "default_true")]
    pub ste: bool,
    #[serde(default)]
    pub grad_when_off: bool,
    /// Gates pinned on at these sites and off elsewhere; scores are not trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_gates: Option<Vec<SiteId>>,
}

fn default_reg() -> RegularizerSpec {
    RegularizerSpec::l1(0.0)
}

fn default_optim() -> OptimSpec {
    OptimSpec::sgd(0.005)
}

fn default_steps() -> usize {
    2000
}

fn default_eval_every() -> usize {
    100
}

fn default_batch() -> usize {
    32
}

fn default_selection() -> Selection {
    Selection::BestVal
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(data: DataConfig) -> Self {
        Self {
            model: ModelConfig::default(),
            adapter: None,
            reg: default_reg(),
            optim: default_optim(),
            schedule: ScheduleSpec::default(),
            steps: default_steps(),
            eval_every: default_eval_every(),
            batch_size: default_batch(),
            seed: 0,
            data,
            selection: default_selection(),
            score_lr: None,
            ste: true,
            grad_when_off: false,
            fixed_gates: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.reg.validate()?;
        if self.steps > 0 && self.schedule.warmup_steps >= self.steps {
            return Err(Error::config(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.schedule.warmup_steps, self.steps
            )));
        }
        if self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::config("eval_every and batch_size must be positive"));
        }
        if let Some(lr) = self.score_lr {
            if !(lr > 0.0) {
                return Err(Error::config(format!("score_lr must be positive, got {lr}")));
            }
        }
        if let Some(a) = &self.adapter {
            if a.rank == 0 || !(a.alpha() > 0.0) || !(a.tau > 0.0) {
                return Err(Error::config("adapter rank, alpha and tau must be positive"));
            }
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub reg_loss: f64,
    /// Present on evaluation steps.
    pub val_acc: Option<f64>,
    pub active_pct: f64,
}

/// CSV with a header row; `val_acc` is empty on steps without evaluation.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.lr, r.task_loss, r.reg_loss, val, r.active_pct
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub timeline: Vec<MetricsRow>,
    /// Gate scores after every step, in site order.
    pub gate_trajectory: Vec<Vec<f64>>,
    pub sites: Vec<SiteId>,
    pub final_model: VisionTransformer,
    /// Model chosen by the run's selection rule.
    pub selected: VisionTransformer,
    pub selected_step: usize,
    pub best_val_acc: Option<f64>,
    pub warnings: Vec<String>,
}

impl RunResult {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.timeline)
    }

    pub fn final_active(&self) -> usize {
        self.final_model.gates().iter().filter(|g| g.is_active()).count()
    }
}

pub fn evaluate_top1(model: &VisionTransformer, ds: &Dataset) -> Result<f64> {
    let (logits, _) = model.predict(&ds.images, EVAL_CHUNK)?;
    top1_accuracy(&logits, &ds.labels)
}

/// K-NN accuracy of the model's class-token embeddings from `train` to `test`.
pub fn knn_accuracy(model: &VisionTransformer, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    let (_, train_emb) = model.predict(&train.images, EVAL_CHUNK)?;
    let (_, test_emb) = model.predict(&test.images, EVAL_CHUNK)?;
    knn_eval(&train_emb, &train.labels, &test_emb, &test.labels, k)
}

fn load(uri: &str, cfg: &ModelConfig) -> Result<Dataset> {
    let ds = resolve_dataset(uri, cfg)?;
    if ds.image_shape() != [cfg.channels, cfg.image_size, cfg.image_size] {
        return Err(Error::data(format!(
            "{uri}: images {:?} do not fit the model ({}x{}x{})",
            ds.image_shape(),
            cfg.channels,
            cfg.image_size,
            cfg.image_size
        )));
    }
    if ds.num_classes > cfg.num_classes {
        return Err(Error::data(format!(
            "{uri}: {} classes but the head has {}",
            ds.num_classes, cfg.num_classes
        )));
    }
    Ok(ds)
}

/// Epoch-wise shuffled mini-batches, deterministic per seed.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4e55),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

fn train_loop(
    mut model: VisionTransformer,
    run: &RunConfig,
    scope: TrainScope,
    warnings: Vec<String>,
) -> Result<RunResult> {
    let cfg = model.cfg.clone();
    let train = load(&run.data.train, &cfg)?;
    let val = load(&run.data.val, &cfg)?;
    if train.is_empty() {
        return Err(Error::data(format!("{}: empty training set", run.data.train)));
    }
    let mode = GateMode {
        ste: run.ste,
        grad_when_off: run.grad_when_off,
    };
    let sites: Vec<SiteId> = model.adapters.keys().copied().collect();
    let mut batcher = Batcher::new(train.len(), run.seed);
    let mut state = OptimState::default();
    let mut timeline = Vec::with_capacity(run.steps);
    let mut trajectory = Vec::with_capacity(run.steps);
    let mut best: Option<(f64, usize, VisionTransformer)> = None;
    let score_factor = run.score_lr.map_or(1.0, |s| s / run.optim.lr);

    for t in 0..run.steps {
        let step = t + 1;
        let lr = cosine_warmup_lr(t, run.optim.lr, &run.schedule, run.steps)?;
        let (x, y) = train.batch(&batcher.next(run.batch_size))?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, scope, mode)?;
        let loss = g.cross_entropy(out.logits, &y)?;
        let task_loss = g.value(loss).item();
        let scores: Vec<f64> = model.adapters.values().map(|b| b.gate.score).collect();
        let reg_loss = regularizer_value(&scores, &run.reg);
        if !(task_loss + reg_loss).is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                task_loss,
                reg_loss,
            });
        }
        g.backward(loss)?;

        let mut opt = Optimizer {
            spec: &run.optim,
            state: &mut state,
        };
        opt.begin_step();
        for (r, v) in &out.bindings {
            match r {
                ParamRef::Tensor(name) => {
                    let Some(grad) = g.grad(*v) else { continue };
                    let param = model
                        .tensor_mut(name)
                        .ok_or_else(|| Error::contract(format!("bound tensor {name} not found")))?;
                    opt.update_tensor(name, param, grad, lr, true)?;
                }
                ParamRef::Score(site) => {
                    let task = g.grad(*v).map_or(0.0, |t| t.item());
                    let blk = model.adapters.get_mut(site).expect("bound site exists");
                    let grad = task + run.reg.grad(blk.gate.score);
                    let name = format!("score.{site}");
                    let mut s = [blk.gate.score];
                    opt.update(&name, &mut s, &[grad], lr * score_factor, false)?;
                    blk.gate.score = s[0];
                }
            }
        }
        let gates = model.gates();
        let active_pct = if gates.is_empty() {
            0.0
        } else {
            active_fraction(&gates)?.percent
        };
        let val_acc = if step % run.eval_every == 0 || step == run.steps {
            let acc = evaluate_top1(&model, &val)?;
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, step, model.clone()));
            }
            Some(acc)
        } else {
            None
        };
        timeline.push(MetricsRow {
            step,
            lr,
            task_loss,
            reg_loss,
            val_acc,
            active_pct,
        });
        trajectory.push(model.adapters.values().map(|b| b.gate.score).collect());
    }

    let (selected, selected_step, best_val_acc) = match (run.selection, best) {
        (Selection::BestVal, Some((acc, step, m))) => (m, step, Some(acc)),
        (Selection::Last, best) => (model.clone(), run.steps, best.map(|b| b.0)),
        (Selection::BestVal, None) => (model.clone(), 0, None),
    };
    Ok(RunResult {
        timeline,
        gate_trajectory: trajectory,
        sites,
        final_model: model,
        selected,
        selected_step,
        best_val_acc,
        warnings,
    })
}

/// Supervised training of a fresh model on the run's training data, without adapters.
pub fn pretrain(run: &RunConfig) -> Result<RunResult> {
    run.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let model = VisionTransformer::new(run.model.clone(), &mut rng)?;
    train_loop(model, run, TrainScope::PRETRAIN, Vec::new())
}

/// Attach gated adapters at every site of `init` and train them with the frozen trunk.
pub fn finetune(run: &RunConfig, init: &VisionTransformer) -> Result<RunResult> {
    run.validate()?;
    let ad = run
        .adapter
        .as_ref()
        .ok_or_else(|| Error::config("fine-tuning requires an adapter section"))?;
    let mut warnings = Vec::new();
    if init.cfg != run.model {
        warnings.push(format!(
            "run config describes {:?} but the initial checkpoint is {:?}; using the checkpoint",
            run.model, init.cfg
        ));
    }
    let mut model = init.clone();
    model.detach_adapters();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(0x0ada_9e75));
    let gate = GateState::new(ad.s_init, ad.tau)?;
    let sites = enumerate_sites(&model.cfg);
    model.attach_adapters(&sites, ad.kind, ad.rank, ad.alpha(), gate, &mut rng)?;
    if let Some(on) = &run.fixed_gates {
        for s in on {
            if !sites.contains(s) {
                return Err(Error::config(format!("fixed gate at unknown site {s}")));
            }
        }
        for blk in model.adapters.values_mut() {
            blk.gate.trainable = false;
            if !on.contains(&blk.site) {
                blk.gate.score = 0.0;
            }
        }
    }
    train_loop(model, run, TrainScope::FINETUNE, warnings)
}

/// Evaluation summary of a fine-tuned model.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneEval {
    pub target_top1: f64,
    pub retention_knn: Option<f64>,
}

pub fn evaluate_run(run: &RunConfig, model: &VisionTransformer, k: usize) -> Result<FinetuneEval> {
    let val = load(&run.data.val, &model.cfg)?;
    let target_top1 = evaluate_top1(model, &val)?;
    let retention_knn = match (&run.data.retention_train, &run.data.retention_val) {
        (Some(tr), Some(te)) => {
            let tr = load(tr, &model.cfg)?;
            let te = load(te, &model.cfg)?;
            Some(knn_accuracy(model, &tr, &te, k)?)
        }
        _ => None,
    };
    Ok(FinetuneEval {
        target_top1,
        retention_knn,
    })
}
