//! Rectified-flow training: config parsing, the flow loss, AdamW, and the
//! staged schedule (backbone pretraining, foreground conditioning, reference
//! adapters).

use std::collections::BTreeMap;
use std::fmt;

use bginpaint_tensor::{Element, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::codec::{downsample_mask, LatentGrid};
use crate::conditioning::{BRANCH_PREFIX, LORA_PREFIX};
use crate::error::{Error, Result};
use crate::model::{
    forward, image_latent, latent_tensor, mask_tensor, ForwardOptions, Inputs, Model, ModelConfig,
    ReferenceTokens, Stage,
};
use crate::params::{Graph, ParamStore, Trainable};
use crate::synth::Sample;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters, read from a flat `key = value` file.
///
/// Keys prefixed `model.` configure the architecture when training starts
/// from scratch; they are ignored when an initial checkpoint is given.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub steps: usize,
    /// Peak learning rate. Constant in stages 0 and 1, cosine-annealed to
    /// zero in stage 2.
    pub lr: f64,
    /// Probability of keeping the reference for a stage-2 sample.
    pub keep_prob: f64,
    /// Reference shift range in latent cells, `[-shift, shift]` per axis.
    pub shift: usize,
    /// Probability of cropping a kept reference to a random sub-grid.
    pub crop_prob: f64,
    /// Decoupled weight decay; never applied to gates or adapters.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Stage-1 runs without an initial checkpoint first pretrain the
    /// backbone text-to-image for this many steps. Must be nonzero there: the
    /// backbone head starts at zero, so an untrained backbone passes no
    /// gradient to the branch.
    pub pretrain_steps: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Inpaint,
            batch_size: 8,
            steps: 2000,
            lr: 4e-4,
            keep_prob: 0.5,
            shift: 2,
            crop_prob: 0.5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            pretrain_steps: 1000,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut model_lines = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::Config(format!("{k}: expected {what}, got {v:?}"));
            let int = || v.parse::<usize>().map_err(|_| bad("a non-negative integer"));
            let float = || v.parse::<f64>().map_err(|_| bad("a number"));
            match k {
                "stage" => {
                    let n = v.parse::<u32>().map_err(|_| bad("0, 1 or 2"))?;
                    cfg.stage = Stage::from_u32(n).map_err(|_| bad("0, 1 or 2"))?;
                }
                "batch_size" => cfg.batch_size = int()?,
                "steps" => cfg.steps = int()?,
                "lr" => cfg.lr = float()?,
                "keep_prob" => cfg.keep_prob = float()?,
                "shift" => cfg.shift = int()?,
                "crop_prob" => cfg.crop_prob = float()?,
                "weight_decay" => cfg.weight_decay = float()?,
                "clip_norm" => cfg.clip_norm = float()?,
                "pretrain_steps" => cfg.pretrain_steps = int()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("an unsigned integer"))?,
                _ => match k.strip_prefix("model.") {
                    Some(mk) => {
                        model_lines.push_str(&format!("{mk}={v}\n"));
                    }
                    None => return Err(Error::Config(format!("unknown config key {k}"))),
                },
            }
        }
        cfg.model = ModelConfig::from_kv(&model_lines)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob("keep_prob", self.keep_prob)?;
        prob("crop_prob", self.crop_prob)?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Config("weight_decay and clip_norm must be non-negative".into()));
        }
        self.model.validate()
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.stage {
            Stage::Reference => {
                let frac = step as f64 / self.steps as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => self.lr,
        }
    }
}

/// One record in model space.
#[derive(Clone, Debug)]
pub struct LatentBundle {
    pub class: usize,
    pub target: Tensor<f32>,
    pub foreground: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub reference: LatentGrid,
}

impl LatentBundle {
    pub fn from_sample(sample: &Sample, patch: usize) -> Result<Self> {
        let target = image_latent(&sample.target, patch)?;
        let fg = image_latent(&sample.foreground, patch)?;
        let mask = downsample_mask(&sample.mask, patch)?;
        Ok(Self {
            class: sample.prompt.id(),
            target: latent_tensor(&target),
            foreground: latent_tensor(&fg),
            mask: mask_tensor(&mask),
            reference: image_latent(&sample.reference, patch)?,
        })
    }
}

pub fn prepare(samples: &[Sample], patch: usize) -> Result<Vec<LatentBundle>> {
    samples.iter().map(|s| LatentBundle::from_sample(s, patch)).collect()
}

/// Moves every cell by `(dy, dx)`; cells shifted in from outside copy the
/// nearest edge cell.
pub fn shift_grid(z: &LatentGrid, dy: i64, dx: i64) -> LatentGrid {
    let mut out = z.clone();
    let c = z.channels;
    for i in 0..z.h {
        let si = (i as i64 - dy).clamp(0, z.h as i64 - 1) as usize;
        for j in 0..z.w {
            let sj = (j as i64 - dx).clamp(0, z.w as i64 - 1) as usize;
            let dst = (i * z.w + j) * c;
            out.data[dst..dst + c].copy_from_slice(z.token(si, sj));
        }
    }
    out
}

pub fn crop_grid(z: &LatentGrid, top: usize, left: usize, h: usize, w: usize) -> Result<LatentGrid> {
    if h == 0 || w == 0 || top + h > z.h || left + w > z.w {
        return Err(Error::Shape(format!(
            "crop {h}x{w} at ({top}, {left}) outside a {}x{} grid",
            z.h, z.w
        )));
    }
    let mut data = Vec::with_capacity(h * w * z.channels);
    for i in top..top + h {
        for j in left..left + w {
            data.extend_from_slice(z.token(i, j));
        }
    }
    Ok(LatentGrid {
        h,
        w,
        channels: z.channels,
        patch: z.patch,
        data,
    })
}

pub fn reference_tokens<E: Element>(z: &LatentGrid) -> ReferenceTokens<E> {
    ReferenceTokens {
        tokens: latent_tensor(z),
        h: z.h,
        w: z.w,
    }
}

/// Everything random about one training sample, fixed before the forward.
#[derive(Clone, Debug)]
pub struct FlowExample<E> {
    pub class: usize,
    pub z0: Tensor<E>,
    pub noise: Tensor<E>,
    pub t: f64,
    pub foreground: Option<(Tensor<E>, Tensor<E>)>,
    pub reference: Option<ReferenceTokens<E>>,
}

impl<E: Element> FlowExample<E> {
    /// `z_t = (1 - t) z0 + t eps`.
    pub fn noisy(&self) -> Result<Tensor<E>> {
        if self.z0.shape() != self.noise.shape() {
            return Err(Error::Shape(format!(
                "latent {:?} and noise {:?} differ",
                self.z0.shape(),
                self.noise.shape()
            )));
        }
        let t = E::from_f64(self.t);
        let a = E::one() - t;
        let data = self
            .z0
            .data()
            .iter()
            .zip(self.noise.data())
            .map(|(&z, &e)| a * z + t * e)
            .collect();
        Ok(Tensor::new(self.z0.shape().to_vec(), data)?)
    }

    /// Velocity target `eps - z0`.
    pub fn velocity(&self) -> Tensor<E> {
        let data = self
            .noise
            .data()
            .iter()
            .zip(self.z0.data())
            .map(|(&e, &z)| e - z)
            .collect();
        Tensor::new(self.z0.shape().to_vec(), data).expect("same shape")
    }
}

/// Records one example's flow loss on `g` and returns the scalar node.
pub fn flow_loss_graph<E: Element>(
    cfg: &ModelConfig,
    g: &mut Graph<'_, E>,
    ex: &FlowExample<E>,
    opts: &ForwardOptions,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&ex.t) {
        return Err(Error::Value(format!("timestep {} outside [0, 1]", ex.t)));
    }
    let inputs = Inputs {
        z_t: ex.noisy()?,
        class: ex.class,
        t: ex.t,
        foreground: ex.foreground.clone(),
        reference: ex.reference.clone(),
    };
    let out = forward(cfg, g, &inputs, opts)?;
    let target = g.constant(ex.velocity());
    Ok(g.tape.mse(out.velocity, target)?)
}

/// Mean flow loss over a batch and its gradient with respect to the
/// `trainable` parameters. Per-sample graphs are reduced in index order.
pub fn flow_loss(
    model: &Model,
    batch: &[FlowExample<f32>],
    trainable: &Trainable,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::Value("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f32;
    let opts = model.options(None);
    let mut total = 0.0f64;
    let mut acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for ex in batch {
        let mut g = Graph::new(&model.params, trainable);
        let loss = flow_loss_graph(&model.config, &mut g, ex, &opts)?;
        total += g.value(loss).data()[0] as f64;
        let grads = g.tape.backward(loss)?;
        for (name, grad) in grads.named() {
            let slot = acc.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
            for (a, &v) in slot.iter_mut().zip(grad.data()) {
                *a += v * scale;
            }
        }
    }
    let grads = acc
        .into_iter()
        .map(|(name, data)| {
            let shape = model.params.get(&name)?.shape().to_vec();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok((total / batch.len() as f64, grads))
}

fn decays(name: &str) -> bool {
    !(name.starts_with(LORA_PREFIX) || name.starts_with(&format!("{BRANCH_PREFIX}gates.")))
}

/// One AdamW update over the parameters named in `grads`.
pub fn adamw_step(
    params: &mut ParamStore<f32>,
    state: &mut OptimizerState,
    grads: &BTreeMap<String, Tensor<f32>>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get(name)?;
        let zeros = || Tensor::<f32>::zeros(p.shape().to_vec());
        let m = state.m.get(name).cloned().unwrap_or_else(|_| zeros());
        let v = state.v.get(name).cloned().unwrap_or_else(|_| zeros());
        let wd = if decays(name) { weight_decay } else { 0.0 };
        let n = p.len();
        let (mut pn, mut mn, mut vn) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i] as f64;
            let mi = BETA1 * m.data()[i] as f64 + (1.0 - BETA1) * gi;
            let vi = BETA2 * v.data()[i] as f64 + (1.0 - BETA2) * gi * gi;
            let pi = p.data()[i] as f64;
            let upd = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS) + wd * pi;
            pn.push((pi - lr * upd) as f32);
            mn.push(mi as f32);
            vn.push(vi as f32);
        }
        let shape = p.shape().to_vec();
        params.insert(name.clone(), Tensor::new(shape.clone(), pn)?);
        state.m.insert(name.clone(), Tensor::new(shape.clone(), mn)?);
        state.v.insert(name.clone(), Tensor::new(shape, vn)?);
    }
    Ok(())
}

fn clip_grads(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// Seed for the batch of `(run seed, stage, step)`.
pub fn batch_seed(seed: u64, stage: Stage, step: usize) -> u64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&stage.as_u32().to_le_bytes());
    key[12..20].copy_from_slice(&(step as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key).gen()
}

/// Per-step log record; displays as `step<TAB>loss<TAB>lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.6e}", self.step, self.loss, self.lr)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss per step of the requested stage.
    pub losses: Vec<f64>,
    /// Stage-2 samples drawn, and how many of them kept the reference.
    pub references_considered: usize,
    pub references_kept: usize,
    /// Hash of every parameter frozen in this stage, before and after.
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

/// Draws one stage's batch; `kept` counts the references retained.
pub fn draw_batch(
    cfg: &TrainConfig,
    stage: Stage,
    data: &[LatentBundle],
    rng: &mut ChaCha8Rng,
    kept: &mut usize,
) -> Result<Vec<FlowExample<f32>>> {
    (0..cfg.batch_size)
        .map(|_| {
            let b = &data[rng.gen_range(0..data.len())];
            let t: f64 = rng.gen();
            let noise: Vec<f32> = (0..b.target.len()).map(|_| rng.sample(StandardNormal)).collect();
            let noise = Tensor::new(b.target.shape().to_vec(), noise)?;
            let foreground = (stage != Stage::Pretrain).then(|| (b.foreground.clone(), b.mask.clone()));
            let reference = if stage == Stage::Reference && rng.gen_bool(cfg.keep_prob) {
                *kept += 1;
                let s = cfg.shift as i64;
                let dy = rng.gen_range(-s..=s);
                let dx = rng.gen_range(-s..=s);
                let mut z = shift_grid(&b.reference, dy, dx);
                if rng.gen_bool(cfg.crop_prob) {
                    let h = rng.gen_range(z.h.div_ceil(2)..=z.h);
                    let w = rng.gen_range(z.w.div_ceil(2)..=z.w);
                    let top = rng.gen_range(0..=z.h - h);
                    let left = rng.gen_range(0..=z.w - w);
                    z = crop_grid(&z, top, left, h, w)?;
                }
                Some(reference_tokens(&z))
            } else {
                None
            };
            Ok(FlowExample {
                class: b.class,
                z0: b.target.clone(),
                noise,
                t,
                foreground,
                reference,
            })
        })
        .collect()
}

fn frozen_hash(params: &ParamStore<f32>, trainable: &Trainable) -> String {
    let frozen: Vec<&str> = params
        .names()
        .filter(|n| !trainable.includes(n))
        .map(String::as_str)
        .collect();
    let mut sub = ParamStore::new();
    for n in frozen {
        sub.insert(n, params.get(n).expect("listed").clone());
    }
    sub.hash_prefixes(&[""])
}

/// Runs `stage` from `start` to `cfg.steps` on `model` in place.
fn run_stage(
    cfg: &TrainConfig,
    stage: Stage,
    steps: usize,
    model: &mut Model,
    optimizer: &mut OptimizerState,
    start: usize,
    data: &[LatentBundle],
    log: &mut dyn FnMut(&StepLog),
) -> Result<(Vec<f64>, usize, usize)> {
    let trainable = model.trainable_for(stage);
    let mut stage_cfg = cfg.clone();
    stage_cfg.stage = stage;
    stage_cfg.steps = steps;
    let mut losses = Vec::with_capacity(steps.saturating_sub(start));
    let (mut considered, mut kept) = (0, 0);
    for step in start..steps {
        let seed = batch_seed(cfg.seed, stage, step);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = draw_batch(cfg, stage, data, &mut rng, &mut kept)?;
        if stage == Stage::Reference {
            considered += batch.len();
        }
        let (loss, mut grads) = flow_loss(model, &batch, &trainable).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { step, batch_seed: seed },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch_seed: seed });
        }
        clip_grads(&mut grads, cfg.clip_norm);
        let lr = stage_cfg.lr_at(step);
        adamw_step(&mut model.params, optimizer, &grads, lr, cfg.weight_decay)?;
        log(&StepLog { stage, step, loss, lr });
        losses.push(loss);
    }
    Ok((losses, considered, kept))
}

/// Whether a checkpoint of stage `from` may start (or resume) stage `to`.
pub fn check_stage_gate(from: Stage, to: Stage) -> Result<()> {
    if from == to || from.as_u32() + 1 == to.as_u32() {
        Ok(())
    } else {
        Err(Error::Stage(format!(
            "a stage-{} checkpoint cannot initialize stage-{} training",
            from.as_u32(),
            to.as_u32()
        )))
    }
}

/// Trains `cfg.stage`. Without `init`, stages 0 and 1 start from a fresh
/// backbone (stage 1 pretrains it first for `pretrain_steps`); stage 2
/// requires a stage-1 or stage-2 checkpoint. A checkpoint of the same stage
/// resumes at its recorded step.
pub fn train(
    cfg: &TrainConfig,
    data: &[LatentBundle],
    init: Option<Checkpoint>,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Value("training dataset is empty".into()));
    }
    let stage = cfg.stage;
    let (mut model, mut optimizer, start) = match init {
        None => {
            if stage == Stage::Reference {
                return Err(Error::Stage("stage-2 training needs a stage-1 checkpoint".into()));
            }
            if stage == Stage::Inpaint && cfg.pretrain_steps == 0 {
                return Err(Error::Config(
                    "stage-1 training without an initial checkpoint needs pretrain_steps > 0".into(),
                ));
            }
            let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
            if stage == Stage::Inpaint && cfg.pretrain_steps > 0 {
                let mut opt = OptimizerState::default();
                run_stage(cfg, Stage::Pretrain, cfg.pretrain_steps, &mut model, &mut opt, 0, data, log)?;
            }
            if stage == Stage::Inpaint {
                model.attach_conditioning()?;
            }
            (model, OptimizerState::default(), 0)
        }
        Some(ck) => {
            check_stage_gate(ck.stage, stage)?;
            let mut model = ck.model();
            if ck.stage == stage {
                (model, ck.optimizer, ck.step as usize)
            } else {
                match stage {
                    Stage::Inpaint => model.attach_conditioning()?,
                    Stage::Reference => model.lora_wrap(cfg.seed)?,
                    Stage::Pretrain => unreachable!("no stage precedes pretraining"),
                }
                (model, OptimizerState::default(), 0)
            }
        }
    };
    model.stage = stage;
    let trainable = model.trainable_for(stage);
    let before = frozen_hash(&model.params, &trainable);
    let (losses, considered, kept) =
        run_stage(cfg, stage, cfg.steps, &mut model, &mut optimizer, start, data, log)?;
    let after = frozen_hash(&model.params, &trainable);
    if before != after {
        return Err(Error::Stage("frozen parameters changed during training".into()));
    }
    let steps_done = start.max(cfg.steps) as u64;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage,
            step: steps_done,
            seed: cfg.seed,
            config: model.config.clone(),
            params: model.params,
            optimizer,
        },
        losses,
        references_considered: considered,
        references_kept: kept,
        frozen_hash_before: before,
        frozen_hash_after: after,
    })
}

/// Stage 1: foreground conditioning with text-only prompts.
pub fn train_stage1(
    cfg: &TrainConfig,
    data: &[LatentBundle],
    init: Option<Checkpoint>,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Inpaint {
        return Err(Error::Stage(format!("config is for stage {}", cfg.stage.as_u32())));
    }
    train(cfg, data, init, log)
}

/// Stage 2: LoRA adapters with reference dropout and shift augmentation.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &[LatentBundle],
    init: Checkpoint,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Reference {
        return Err(Error::Stage(format!("config is for stage {}", cfg.stage.as_u32())));
    }
    train(cfg, data, Some(init), log)
}
