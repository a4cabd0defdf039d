//! Diffusion-transformer building blocks: token positions, 2D sinusoidal
//! encodings, the attention scale matrix, timestep embedding, attention and
//! the adaptive-layernorm transformer block.

use bginpaint_tensor::{Element, Tensor, Var};

use crate::conditioning::lora_linear;
use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Prompt tokens per class.
    pub prompt_len: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub num_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            dim: 128,
            heads: 4,
            prompt_len: 8,
            mlp_ratio: 4,
            patch: 2,
            num_classes: crate::synth::NUM_CLASSES,
            grid_h: 16,
            grid_w: 16,
        }
    }
}

impl DiTConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn target_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a multiple of 4 for 2D sinusoidal encoding",
                self.dim
            )));
        }
        if self.depth == 0 || self.prompt_len == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config("depth, prompt length and grid must be positive".into()));
        }
        Ok(())
    }
}

/// Integer 2D position of a token.
pub type Position = (usize, usize);

/// Per-segment positions of a `[prompt | target | reference]` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionTable {
    pub prompt: Vec<Position>,
    pub target: Vec<Position>,
    pub reference: Vec<Position>,
}

impl PositionTable {
    pub fn all(&self) -> impl Iterator<Item = Position> + '_ {
        self.prompt
            .iter()
            .chain(&self.target)
            .chain(&self.reference)
            .copied()
    }
}

/// Reference token `(i, j)` on a target grid of `h x w` sits at `(h + i, w + j)`.
pub fn reference_position(h: usize, w: usize, i: usize, j: usize) -> Position {
    (h + i, w + j)
}

/// Shared position of all prompt tokens: `(3h, 3w)`, beyond the target grid
/// and beyond any reference grid with `h_r <= 2h`, `w_r <= 2w`.
pub fn prompt_sentinel(h: usize, w: usize) -> Position {
    (3 * h, 3 * w)
}

/// Target tokens keep `(i, j)`; reference tokens are offset by the target
/// extents; prompt tokens share the sentinel.
pub fn assign_positions(
    h: usize,
    w: usize,
    h_r: usize,
    w_r: usize,
    prompt_len: usize,
) -> PositionTable {
    let grid = |rows: usize, cols: usize| {
        (0..rows).flat_map(move |i| (0..cols).map(move |j| (i, j)))
    };
    PositionTable {
        prompt: vec![prompt_sentinel(h, w); prompt_len],
        target: grid(h, w).collect(),
        reference: grid(h_r, w_r)
            .map(|(i, j)| reference_position(h, w, i, j))
            .collect(),
    }
}

/// Frequency ladder `10000^(-k/q)` for `q = dim / 4` sinusoid pairs per axis.
fn frequencies(dim: usize) -> Vec<f64> {
    let q = dim / 4;
    (0..q)
        .map(|k| (10000f64).powf(-(k as f64) / q as f64))
        .collect()
}

/// Additive 2D sinusoidal encoding, `[len, dim]`. Per token the layout is
/// `[sin(i w), cos(i w), sin(j w), cos(j w)]`, each block `dim / 4` wide.
pub fn positional_encode<E: Element>(positions: &[Position], dim: usize) -> Tensor<E> {
    let freqs = frequencies(dim);
    let q = freqs.len();
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &(i, j) in positions {
        for coord in [i as f64, j as f64] {
            data.extend(freqs.iter().map(|f| E::from_f64((coord * f).sin())));
            data.extend(freqs.iter().map(|f| E::from_f64((coord * f).cos())));
        }
        data.extend(std::iter::repeat_n(E::zero(), dim - 4 * q));
    }
    Tensor::new([positions.len(), dim], data).expect("encoding shape")
}

/// Block pattern of the attention modulation matrix over
/// `[prompt (m) | target (n) | reference (l)]`: ones inside prompt/target and
/// inside reference, `s` between reference and everything else.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleMatrix {
    pub s: f32,
    pub m: usize,
    pub n: usize,
    pub l: usize,
}

impl ScaleMatrix {
    pub fn len(&self) -> usize {
        self.m + self.n + self.l
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        let boundary = self.m + self.n;
        if (row < boundary) == (col < boundary) {
            1.0
        } else {
            self.s
        }
    }

    pub fn materialize<E: Element>(&self) -> Tensor<E> {
        let size = self.len();
        let s = E::from_f64(self.s as f64);
        let mut data = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                data.push(if self.get(r, c) == 1.0 { E::one() } else { s });
            }
        }
        Tensor::new([size, size], data).expect("scale matrix shape")
    }
}

pub fn build_scale_matrix(m: usize, n: usize, l: usize, s: f32) -> Result<ScaleMatrix> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::Value(format!("attention scale {s} must be finite and >= 0")));
    }
    Ok(ScaleMatrix { s, m, n, l })
}

/// Sinusoidal timestep features of `t * 1000`, `[1, dim]`, cosines first.
pub fn timestep_embedding<E: Element>(t: f64, dim: usize) -> Tensor<E> {
    let half = dim / 2;
    let arg = t * 1000.0;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64).ln() * k as f64 / half as f64).exp())
        .collect();
    let mut data: Vec<E> = freqs.iter().map(|f| E::from_f64((arg * f).cos())).collect();
    data.extend(freqs.iter().map(|f| E::from_f64((arg * f).sin())));
    data.resize(dim, E::zero());
    Tensor::new([1, dim], data).expect("timestep shape")
}

/// Joint token sequence with fixed segment lengths.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub m: usize,
    pub n: usize,
    pub l: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.m + self.n + self.l
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Multi-head self-attention over `x` (`[L, D]`) with optional post-softmax
/// modulation `scale` (`[L, L]`, shared by every head). Scores are multiplied
/// by the modulation without renormalizing.
pub fn attention<E: Element>(
    g: &mut Graph<'_, E>,
    prefix: &str,
    x: Var,
    heads: usize,
    scale: Option<Var>,
    lora_scale: E,
) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    let (len, dim) = (shape[0], shape[1]);
    if let Some(s) = scale {
        let ss = g.tape.shape(s);
        if ss != [len, len] {
            return Err(Error::Shape(format!(
                "scale matrix {ss:?} does not match sequence length {len}"
            )));
        }
    }
    let hd = dim / heads;
    let qkv = lora_linear(g, &format!("{prefix}.qkv"), x, lora_scale)?;
    let inv_sqrt = E::from_f64(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.tape.slice(qkv, 1, h * hd, hd)?;
        let k = g.tape.slice(qkv, 1, dim + h * hd, hd)?;
        let v = g.tape.slice(qkv, 1, 2 * dim + h * hd, hd)?;
        let scores = g.tape.matmul_nt(q, k)?;
        let scores = g.tape.scale(scores, inv_sqrt)?;
        let mut probs = g.tape.softmax(scores)?;
        if let Some(s) = scale {
            probs = g.tape.mul(probs, s)?;
        }
        outs.push(g.tape.matmul(probs, v)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.tape.concat(&outs, 1)?
    };
    lora_linear(g, &format!("{prefix}.attn_out"), merged, lora_scale)
}

/// `x * (1 + scale) + shift`, with row vectors broadcast over tokens.
fn modulate<E: Element>(g: &mut Graph<'_, E>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let one_plus = g.tape.add_scalar(scale, E::one())?;
    let y = g.tape.mul_row(x, one_plus)?;
    Ok(g.tape.add_row(y, shift)?)
}

/// Transformer block with adaptive layernorm (shift, scale, gate per branch)
/// driven by the conditioning vector `cond` (`[1, D]`, already activated).
pub fn dit_block<E: Element>(
    g: &mut Graph<'_, E>,
    prefix: &str,
    x: Var,
    cond: Var,
    heads: usize,
    attn_scale: Option<Var>,
    lora_scale: E,
) -> Result<Var> {
    let dim = g.tape.shape(x)[1];
    let ada = lora_linear(g, &format!("{prefix}.ada"), cond, lora_scale)?;
    let mut chunk = |k: usize| g.tape.slice(ada, 1, k * dim, dim);
    let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
    let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);

    let h = g.tape.layer_norm(x)?;
    let h = modulate(g, h, shift1, scale1)?;
    let h = attention(g, prefix, h, heads, attn_scale, lora_scale)?;
    let h = g.tape.mul_row(h, gate1)?;
    let x = g.tape.add(x, h)?;

    let h = g.tape.layer_norm(x)?;
    let h = modulate(g, h, shift2, scale2)?;
    let h = lora_linear(g, &format!("{prefix}.mlp_in"), h, lora_scale)?;
    let h = g.tape.gelu(h)?;
    let h = lora_linear(g, &format!("{prefix}.mlp_out"), h, lora_scale)?;
    let h = g.tape.mul_row(h, gate2)?;
    Ok(g.tape.add(x, h)?)
}

/// Linear layers of a block, as `(suffix, fan_in, fan_out)`.
pub fn block_linears(cfg: &DiTConfig) -> [(&'static str, usize, usize); 5] {
    let d = cfg.dim;
    [
        ("ada", d, 6 * d),
        ("qkv", d, 3 * d),
        ("attn_out", d, d),
        ("mlp_in", d, cfg.mlp_ratio * d),
        ("mlp_out", cfg.mlp_ratio * d, d),
    ]
}

/// Adds one block's parameters. The adaptive-norm projection starts at zero,
/// so a fresh block is the identity map.
pub fn init_block(store: &mut ParamStore<f32>, init: &mut Init<'_>, prefix: &str, cfg: &DiTConfig) {
    for (suffix, fan_in, fan_out) in block_linears(cfg) {
        let w = if suffix == "ada" {
            Tensor::zeros([fan_in, fan_out])
        } else {
            init.xavier(fan_in, fan_out)
        };
        store.insert(format!("{prefix}.{suffix}.w"), w);
        store.insert(format!("{prefix}.{suffix}.b"), Tensor::zeros([fan_out]));
    }
}
