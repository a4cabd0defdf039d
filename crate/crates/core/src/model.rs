//! Full inpainting model: backbone, optional control branch or input
//! concatenation, optional LoRA adapters, and the forward pass that
//! assembles `[prompt | target | reference]` token sequences.

use std::fmt;
use std::str::FromStr;

use bginpaint_tensor::{Element, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode, encode, ImageRaster, LatentGrid, MaskGrid};
use crate::conditioning::{
    control_branch_forward, init_branch, lora_linear, lora_targets, lora_wrap, BranchConfig,
    BRANCH_PREFIX, LORA_PREFIX,
};
use crate::dit::{
    assign_positions, build_scale_matrix, dit_block, init_block, positional_encode,
    timestep_embedding, DiTConfig, TokenSequence,
};
use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamStore, Trainable};

/// How foreground and mask enter the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integration {
    /// Extra input channels on the backbone's first projection.
    Concat,
    /// Auxiliary branch with zero-initialized gates.
    Branch,
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integration::Concat => "concat",
            Integration::Branch => "branch",
        })
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Integration::Concat),
            "branch" => Ok(Integration::Branch),
            other => Err(Error::Config(format!(
                "integration must be concat or branch, got {other}"
            ))),
        }
    }
}

/// Training stage a parameter table has completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Text-to-image backbone pretraining.
    Pretrain = 0,
    /// Foreground conditioning, text-only.
    Inpaint = 1,
    /// LoRA adapters with reference tokens.
    Reference = 2,
}

impl Stage {
    pub fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Stage::Pretrain),
            1 => Ok(Stage::Inpaint),
            2 => Ok(Stage::Reference),
            other => Err(Error::Stage(format!("unknown stage {other}"))),
        }
    }

    pub fn as_u32(self) -> u32 {
        self as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dit: DiTConfig,
    pub integration: Integration,
    pub branch: BranchConfig,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let dit = DiTConfig::default();
        let branch = BranchConfig::evenly_spaced(2, dit.depth);
        Self {
            dit,
            integration: Integration::Branch,
            branch,
            lora_rank: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        if self.integration == Integration::Branch {
            self.branch.validate(self.dit.depth)?;
        }
        Ok(())
    }

    /// `key=value` lines, the inverse of [`ModelConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let d = &self.dit;
        let sites: Vec<String> = self.branch.sites.iter().map(|s| s.to_string()).collect();
        format!(
            "depth={}\ndim={}\nheads={}\nprompt_len={}\nmlp_ratio={}\npatch={}\nnum_classes={}\ngrid_h={}\ngrid_w={}\nintegration={}\nbranch_depth={}\nbranch_sites={}\nlora_rank={}\n",
            d.depth,
            d.dim,
            d.heads,
            d.prompt_len,
            d.mlp_ratio,
            d.patch,
            d.num_classes,
            d.grid_h,
            d.grid_w,
            self.integration,
            self.branch.depth,
            sites.join(","),
            self.lora_rank
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut sites: Option<Vec<usize>> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("{k}: expected integer, got {v:?}")))
            };
            match k {
                "depth" => cfg.dit.depth = num()?,
                "dim" => cfg.dit.dim = num()?,
                "heads" => cfg.dit.heads = num()?,
                "prompt_len" => cfg.dit.prompt_len = num()?,
                "mlp_ratio" => cfg.dit.mlp_ratio = num()?,
                "patch" => cfg.dit.patch = num()?,
                "num_classes" => cfg.dit.num_classes = num()?,
                "grid_h" => cfg.dit.grid_h = num()?,
                "grid_w" => cfg.dit.grid_w = num()?,
                "integration" => cfg.integration = v.parse()?,
                "branch_depth" => cfg.branch.depth = num()?,
                "branch_sites" => {
                    let parsed: std::result::Result<Vec<usize>, _> = if v.is_empty() {
                        Ok(Vec::new())
                    } else {
                        v.split(',').map(|s| s.trim().parse()).collect()
                    };
                    sites = Some(parsed.map_err(|_| {
                        Error::Config(format!("branch_sites: expected integers, got {v:?}"))
                    })?);
                }
                "lora_rank" => cfg.lora_rank = num()?,
                other => return Err(Error::Config(format!("unknown model key {other}"))),
            }
        }
        cfg.branch.sites =
            sites.unwrap_or_else(|| BranchConfig::evenly_spaced(cfg.branch.depth, cfg.dit.depth).sites);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reference latent tokens with their own grid extents.
#[derive(Clone, Debug)]
pub struct ReferenceTokens<E> {
    pub tokens: Tensor<E>,
    pub h: usize,
    pub w: usize,
}

/// One sample's conditioning set.
#[derive(Clone, Debug)]
pub struct Inputs<E> {
    /// Noisy target latent, `[n, C]`.
    pub z_t: Tensor<E>,
    pub class: usize,
    pub t: f64,
    /// Foreground latent `[n, C]` and latent mask `[n, 1]`.
    pub foreground: Option<(Tensor<E>, Tensor<E>)>,
    pub reference: Option<ReferenceTokens<E>>,
}

/// Codec output mapped to model space, `2x - 1`, so clean latents sit on
/// the same scale as the unit-variance noise.
pub fn image_latent(image: &ImageRaster, patch: usize) -> Result<LatentGrid> {
    let mut z = encode(image, patch)?;
    for v in &mut z.data {
        *v = 2.0 * *v - 1.0;
    }
    Ok(z)
}

/// Inverse of [`image_latent`], clamped to the displayable range.
pub fn latent_image(z: &LatentGrid) -> Result<ImageRaster> {
    let mut pix = z.clone();
    for v in &mut pix.data {
        *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0);
    }
    decode(&pix)
}

pub fn latent_tensor<E: Element>(z: &LatentGrid) -> Tensor<E> {
    Tensor::new([z.tokens(), z.channels], z.data.iter().map(|&v| E::from_f64(v as f64)).collect())
        .expect("latent shape")
}

pub fn mask_tensor<E: Element>(m: &MaskGrid) -> Tensor<E> {
    Tensor::new([m.h * m.w, 1], m.data.iter().map(|&v| E::from_f64(v as f64)).collect())
        .expect("mask shape")
}

/// Inference-time controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Multiplier on every LoRA adapter output.
    pub lora_scale: f64,
    /// Modulation between reference and other tokens; `None` leaves
    /// attention unmodulated.
    pub attn_scale: Option<f32>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            lora_scale: 1.0,
            attn_scale: None,
        }
    }
}

/// What a forward pass built, for structural checks.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub velocity: Var,
    pub sequence: TokenSequence,
    pub branch_used: bool,
}

/// Parameter table plus the configuration that gives it meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub stage: Stage,
    lora_scale: f32,
}

impl Model {
    /// Fresh backbone only.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = &config.dit;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut p = ParamStore::new();
        let c = d.latent_channels();
        let dim = d.dim;
        p.insert("backbone.in_proj.w", init.xavier(c, dim));
        p.insert("backbone.in_proj.b", Tensor::zeros([dim]));
        p.insert(
            "backbone.prompt_embed",
            init.normal(&[d.num_classes * d.prompt_len, dim], 0.5),
        );
        p.insert("backbone.prompt_segment", init.normal(&[dim], 0.5));
        p.insert("backbone.t_mlp1.w", init.xavier(dim, dim));
        p.insert("backbone.t_mlp1.b", Tensor::zeros([dim]));
        p.insert("backbone.t_mlp2.w", init.xavier(dim, dim));
        p.insert("backbone.t_mlp2.b", Tensor::zeros([dim]));
        for i in 0..d.depth {
            init_block(&mut p, &mut init, &format!("backbone.blocks.{i}"), d);
        }
        p.insert("backbone.final_ada.w", Tensor::zeros([dim, 2 * dim]));
        p.insert("backbone.final_ada.b", Tensor::zeros([2 * dim]));
        p.insert("backbone.head.w", Tensor::zeros([dim, c]));
        p.insert("backbone.head.b", Tensor::zeros([c]));
        Ok(Self {
            config,
            params: p,
            stage: Stage::Pretrain,
            lora_scale: 1.0,
        })
    }

    /// Parameter table a checkpoint of `stage` must hold: names and shapes
    /// only, values are a throwaway initialization.
    pub fn skeleton(config: &ModelConfig, stage: Stage) -> Result<ParamStore<f32>> {
        let mut m = Model::init(config.clone(), 0)?;
        if stage >= Stage::Inpaint {
            m.attach_conditioning()?;
        }
        if stage >= Stage::Reference {
            m.lora_wrap(0)?;
        }
        Ok(m.params)
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<f32>, stage: Stage) -> Self {
        Self {
            config,
            params,
            stage,
            lora_scale: 1.0,
        }
    }

    pub fn has_branch(&self) -> bool {
        self.params.contains(&format!("{BRANCH_PREFIX}in_proj.w"))
    }

    pub fn has_concat_input(&self) -> bool {
        self.params.contains("backbone.in_proj_cond.w")
    }

    pub fn is_lora_wrapped(&self) -> bool {
        self.params.names().any(|n| n.starts_with(LORA_PREFIX))
    }

    /// Adds the foreground pathway chosen by the configuration: a control
    /// branch, or zero-initialized extra input rows for concatenation.
    pub fn attach_conditioning(&mut self) -> Result<()> {
        match self.config.integration {
            Integration::Branch => init_branch(&mut self.params, &self.config.dit, &self.config.branch),
            Integration::Concat => {
                if self.has_concat_input() {
                    return Err(Error::Stage("concat input already attached".into()));
                }
                let c = self.config.dit.latent_channels();
                self.params
                    .insert("backbone.in_proj_cond.w", Tensor::zeros([c + 1, self.config.dit.dim]));
                Ok(())
            }
        }
    }

    pub fn lora_wrap(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = lora_targets(&self.config.dit);
        lora_wrap(&mut self.params, &targets, self.config.lora_rank, &mut rng)
    }

    pub fn set_lora_scale(&mut self, s: f32) -> Result<()> {
        if !self.is_lora_wrapped() {
            return Err(Error::Stage("set_lora_scale on a model without adapters".into()));
        }
        if !s.is_finite() {
            return Err(Error::Value(format!("LoRA scale {s} is not finite")));
        }
        self.lora_scale = s;
        Ok(())
    }

    pub fn lora_scale(&self) -> f32 {
        self.lora_scale
    }

    /// Parameters optimized in a given stage.
    pub fn trainable_for(&self, stage: Stage) -> Trainable {
        match (stage, self.config.integration) {
            (Stage::Pretrain, _) => Trainable::prefixes(&["backbone."]),
            (Stage::Inpaint, Integration::Branch) => Trainable::prefixes(&[BRANCH_PREFIX]),
            (Stage::Inpaint, Integration::Concat) => Trainable::prefixes(&["backbone."]),
            (Stage::Reference, _) => Trainable::prefixes(&[LORA_PREFIX]),
        }
    }

    /// Forward options carrying this model's LoRA scale.
    pub fn options(&self, attn_scale: Option<f32>) -> ForwardOptions {
        ForwardOptions {
            lora_scale: self.lora_scale as f64,
            attn_scale,
        }
    }

    /// Velocity prediction in `f32`, no gradients.
    pub fn predict(&self, inputs: &Inputs<f32>, opts: &ForwardOptions) -> Result<Tensor<f32>> {
        let t = Trainable::Nothing;
        let mut g = Graph::new(&self.params, &t);
        let out = forward(&self.config, &mut g, inputs, opts)?;
        Ok(g.value(out.velocity).clone())
    }
}

/// Builds the full forward graph and returns the `[n, C]` velocity over
/// target tokens. Prompt and reference outputs are discarded.
pub fn forward<E: Element>(
    cfg: &ModelConfig,
    g: &mut Graph<'_, E>,
    inputs: &Inputs<E>,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let d = &cfg.dit;
    let (h, w) = (d.grid_h, d.grid_w);
    let n = h * w;
    let c = d.latent_channels();
    if inputs.z_t.shape() != [n, c] {
        return Err(Error::Shape(format!(
            "noisy latent {:?}, expected [{n}, {c}]",
            inputs.z_t.shape()
        )));
    }
    if inputs.class >= d.num_classes {
        return Err(Error::Value(format!("class {} out of range", inputs.class)));
    }
    if !(0.0..=1.0).contains(&inputs.t) {
        return Err(Error::Value(format!("timestep {} outside [0, 1]", inputs.t)));
    }
    let lora_s = E::from_f64(opts.lora_scale);
    let (h_r, w_r) = inputs
        .reference
        .as_ref()
        .map(|r| (r.h, r.w))
        .unwrap_or((0, 0));
    if let Some(r) = &inputs.reference {
        if r.tokens.shape() != [r.h * r.w, c] || r.h == 0 || r.w == 0 {
            return Err(Error::Shape(format!(
                "reference tokens {:?} for a {}x{} grid",
                r.tokens.shape(),
                r.h,
                r.w
            )));
        }
        if r.h > 2 * h || r.w > 2 * w {
            return Err(Error::Shape(format!(
                "reference grid {}x{} exceeds twice the target grid",
                r.h, r.w
            )));
        }
    }
    let positions = assign_positions(h, w, h_r, w_r, d.prompt_len);

    // Timestep conditioning.
    let temb = g.constant(timestep_embedding(inputs.t, d.dim));
    let cnd = lora_linear(g, "backbone.t_mlp1", temb, lora_s)?;
    let cnd = g.tape.gelu(cnd)?;
    let cnd = lora_linear(g, "backbone.t_mlp2", cnd, lora_s)?;
    let cond = g.tape.gelu(cnd)?;

    // Prompt tokens.
    let table = g.param("backbone.prompt_embed")?;
    let idx: Vec<usize> = (0..d.prompt_len).map(|k| inputs.class * d.prompt_len + k).collect();
    let prompt = g.tape.embedding(table, &idx)?;
    let seg = g.param("backbone.prompt_segment")?;
    let prompt = g.tape.add_row(prompt, seg)?;
    let prompt_pe = g.constant(positional_encode(&positions.prompt, d.dim));
    let prompt = g.tape.add(prompt, prompt_pe)?;

    // Target tokens.
    let z_t = g.constant(inputs.z_t.clone());
    let fg = match &inputs.foreground {
        Some((zf, zm)) => {
            if zf.shape() != [n, c] || zm.shape() != [n, 1] {
                return Err(Error::Shape(format!(
                    "foreground {:?} / mask {:?} do not match the {h}x{w} grid",
                    zf.shape(),
                    zm.shape()
                )));
            }
            Some((g.constant(zf.clone()), g.constant(zm.clone())))
        }
        None => None,
    };
    let target_pe = g.constant(positional_encode(&positions.target, d.dim));
    let concat_input = g.has("backbone.in_proj_cond.w");
    let target = match (concat_input, fg) {
        (true, Some((zf, zm))) => {
            let x = crate::conditioning::channel_concat(g, z_t, zf, zm)?;
            let base = g.param("backbone.in_proj.w")?;
            let extra = g.param("backbone.in_proj_cond.w")?;
            let wfull = g.tape.concat(&[base, extra], 0)?;
            let b = g.param("backbone.in_proj.b")?;
            let y = g.tape.matmul(x, wfull)?;
            g.tape.add_row(y, b)?
        }
        _ => lora_linear(g, "backbone.in_proj", z_t, lora_s)?,
    };
    let target = g.tape.add(target, target_pe)?;

    // Reference tokens.
    let mut parts = vec![prompt, target];
    let l = h_r * w_r;
    if let Some(r) = &inputs.reference {
        let zr = g.constant(r.tokens.clone());
        let x = lora_linear(g, "backbone.in_proj", zr, lora_s)?;
        let pe = g.constant(positional_encode(&positions.reference, d.dim));
        parts.push(g.tape.add(x, pe)?);
    }
    let m = d.prompt_len;
    let mut seq = g.tape.concat(&parts, 0)?;
    let sequence = TokenSequence {
        tokens: seq,
        m,
        n,
        l,
    };

    let scale = match (opts.attn_scale, l) {
        (Some(s), l) if l > 0 => {
            let sm = build_scale_matrix(m, n, l, s)?;
            Some(g.constant(sm.materialize()))
        }
        _ => None,
    };

    let branch_used = fg.is_some() && g.has(&format!("{BRANCH_PREFIX}in_proj.w"));
    let residuals = match fg {
        Some((zf, zm)) if branch_used => {
            control_branch_forward(g, d, &cfg.branch, z_t, zf, zm, target_pe, cond)?
        }
        _ => Vec::new(),
    };

    let zeros_prompt = g.constant(Tensor::zeros([m, d.dim]));
    let zeros_ref = (l > 0).then(|| g.constant(Tensor::zeros([l, d.dim])));
    for i in 0..d.depth {
        for &(_, r) in residuals.iter().filter(|(site, _)| *site == i) {
            let mut pad = vec![zeros_prompt, r];
            pad.extend(zeros_ref);
            let full = g.tape.concat(&pad, 0)?;
            seq = g.tape.add(seq, full)?;
        }
        seq = dit_block(
            g,
            &format!("backbone.blocks.{i}"),
            seq,
            cond,
            d.heads,
            scale,
            lora_s,
        )?;
    }

    let tgt = g.tape.slice(seq, 0, m, n)?;
    let ada = lora_linear(g, "backbone.final_ada", cond, lora_s)?;
    let shift = g.tape.slice(ada, 1, 0, d.dim)?;
    let sc = g.tape.slice(ada, 1, d.dim, d.dim)?;
    let x = g.tape.layer_norm(tgt)?;
    let one_plus = g.tape.add_scalar(sc, E::one())?;
    let x = g.tape.mul_row(x, one_plus)?;
    let x = g.tape.add_row(x, shift)?;
    let velocity = lora_linear(g, "backbone.head", x, lora_s)?;
    Ok(ForwardOutput {
        velocity,
        sequence,
        branch_used,
    })
}
