//! Euler integration of the learned velocity field, text-only (T2I) or
//! text-plus-reference (TR2I).

use bginpaint_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{downsample_mask, ImageRaster, LatentGrid, Mask};
use crate::error::{Error, Result};
use crate::model::{
    forward, image_latent, latent_image, latent_tensor, mask_tensor, ForwardOptions, Inputs, Model,
    Stage,
};
use crate::params::{Graph, Trainable};
use crate::synth::PromptLabel;
use crate::trainer::reference_tokens;

pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub foreground: ImageRaster,
    pub mask: Mask,
    pub prompt: PromptLabel,
    pub reference: Option<ImageRaster>,
    pub steps: usize,
    pub lora_scale: f32,
    /// Ignored without a reference.
    pub attn_scale: f32,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(foreground: ImageRaster, mask: Mask, prompt: PromptLabel, seed: u64) -> Self {
        Self {
            foreground,
            mask,
            prompt,
            reference: None,
            steps: DEFAULT_STEPS,
            lora_scale: 1.0,
            attn_scale: 1.0,
            seed,
        }
    }
}

/// Generated image plus what the sampler built, for structural checks.
#[derive(Clone, Debug)]
pub struct Generation {
    pub image: ImageRaster,
    pub latent: LatentGrid,
    /// Token count of the transformer sequence (prompt + target + reference).
    pub sequence_len: usize,
    pub reference_tokens: usize,
}

/// Integrates `dz/dt = v(z, t)` from `t = 1` to `t = 0` on a uniform grid,
/// `z <- z - dt * v`.
pub fn euler(
    mut z: Tensor<f32>,
    steps: usize,
    mut velocity: impl FnMut(&Tensor<f32>, f64) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    if steps == 0 {
        return Err(Error::Value("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::Shape(format!("velocity {:?} for latent {:?}", v.shape(), z.shape())));
        }
        let step = dt as f32;
        let data = z.data().iter().zip(v.data()).map(|(&a, &b)| a - step * b).collect();
        z = Tensor::new(z.shape().to_vec(), data)?;
    }
    Ok(z)
}

pub fn initial_noise(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

pub fn generate_detailed(req: &SampleRequest, model: &Model) -> Result<Generation> {
    let d = &model.config.dit;
    if req.reference.is_some() && model.stage != Stage::Reference {
        return Err(Error::Stage(format!(
            "reference-conditioned sampling needs a stage-2 checkpoint, got stage {}",
            model.stage.as_u32()
        )));
    }
    if !(req.lora_scale.is_finite() && req.attn_scale.is_finite() && req.attn_scale >= 0.0) {
        return Err(Error::Value("scales must be finite and the attention scale non-negative".into()));
    }
    let (hp, wp) = (d.grid_h * d.patch, d.grid_w * d.patch);
    if req.foreground.height != hp || req.foreground.width != wp {
        return Err(Error::Shape(format!(
            "foreground is {}x{}, model expects {hp}x{wp}",
            req.foreground.height, req.foreground.width
        )));
    }
    let fg = latent_tensor::<f32>(&image_latent(&req.foreground, d.patch)?);
    let zm = mask_tensor::<f32>(&downsample_mask(&req.mask, d.patch)?);
    let foreground = (model.stage >= Stage::Inpaint).then(|| (fg, zm));
    let reference = match &req.reference {
        Some(r) => Some(reference_tokens(&image_latent(r, d.patch)?)),
        None => None,
    };
    let opts = ForwardOptions {
        lora_scale: req.lora_scale as f64,
        attn_scale: reference.as_ref().map(|_| req.attn_scale),
    };
    let n = d.target_tokens();
    let c = d.latent_channels();
    let z1 = initial_noise(req.seed, &[n, c]);
    let frozen = Trainable::Nothing;
    let mut sequence_len = 0;
    let z0 = euler(z1, req.steps, |z, t| {
        let mut g = Graph::new(&model.params, &frozen);
        let inputs = Inputs {
            z_t: z.clone(),
            class: req.prompt.id(),
            t,
            foreground: foreground.clone(),
            reference: reference.clone(),
        };
        let out = forward(&model.config, &mut g, &inputs, &opts)?;
        sequence_len = out.sequence.len();
        Ok(g.value(out.velocity).clone())
    })?;
    let latent = LatentGrid {
        h: d.grid_h,
        w: d.grid_w,
        channels: c,
        patch: d.patch,
        data: z0.into_vec(),
    };
    Ok(Generation {
        image: latent_image(&latent)?,
        latent,
        sequence_len,
        reference_tokens: reference.map(|r| r.h * r.w).unwrap_or(0),
    })
}

pub fn generate(req: &SampleRequest, model: &Model) -> Result<ImageRaster> {
    Ok(generate_detailed(req, model)?.image)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lora,
    Attention,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(SweepAxis::Lora),
            "attention" => Ok(SweepAxis::Attention),
            other => Err(Error::Config(format!("sweep axis must be lora or attention, got {other}"))),
        }
    }
}

/// One image per value along `axis`; every other request field, including
/// the seed, is shared.
pub fn sweep(req: &SampleRequest, model: &Model, axis: SweepAxis, values: &[f32]) -> Result<Vec<ImageRaster>> {
    if values.is_empty() {
        return Err(Error::Value("sweep needs at least one value".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Value(format!("sweep value {v} outside [0, 1]")));
    }
    values
        .iter()
        .map(|&v| {
            let mut r = req.clone();
            match axis {
                SweepAxis::Lora => r.lora_scale = v,
                SweepAxis::Attention => r.attn_scale = v,
            }
            generate(&r, model)
        })
        .collect()
}
