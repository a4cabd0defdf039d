//! Foreground/mask conditioning (input channel concatenation or a gated
//! control branch) and low-rank adapters with a user scale.

use bginpaint_tensor::{Element, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::dit::{block_linears, dit_block, DiTConfig};
use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamStore};

pub const LORA_PREFIX: &str = "lora.";
pub const BRANCH_PREFIX: &str = "branch.";

/// `y = x W + b`, plus `s * (x A) B` when an adapter is registered for `name`.
pub fn lora_linear<E: Element>(g: &mut Graph<'_, E>, name: &str, x: Var, s: E) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.tape.matmul(x, w)?;
    let y = g.tape.add_row(y, b)?;
    let down_name = format!("{LORA_PREFIX}{name}.down");
    if !g.has(&down_name) {
        return Ok(y);
    }
    let down = g.param(&down_name)?;
    let up = g.param(&format!("{LORA_PREFIX}{name}.up"))?;
    let low = g.tape.matmul(x, down)?;
    let delta = g.tape.matmul(low, up)?;
    let delta = g.tape.scale(delta, s)?;
    Ok(g.tape.add(y, delta)?)
}

/// Per-token channel concatenation `(z_t, z_f, z_m)`, `[n, 2C + 1]`.
pub fn channel_concat<E: Element>(
    g: &mut Graph<'_, E>,
    z_t: Var,
    z_f: Var,
    z_m: Var,
) -> Result<Var> {
    let (st, sf, sm) = (g.tape.shape(z_t), g.tape.shape(z_f), g.tape.shape(z_m));
    if st[0] != sf[0] || st[0] != sm[0] || st[1] != sf[1] || sm[1] != 1 {
        return Err(Error::Shape(format!(
            "cannot concatenate latent {st:?}, foreground {sf:?} and mask {sm:?}"
        )));
    }
    Ok(g.tape.concat(&[z_t, z_f, z_m], 1)?)
}

/// Control-branch layout: `depth` blocks, branch block `j` feeding base block `sites[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchConfig {
    pub depth: usize,
    pub sites: Vec<usize>,
}

impl BranchConfig {
    /// Evenly spaced injection sites starting at block 0.
    pub fn evenly_spaced(depth: usize, base_depth: usize) -> Self {
        let sites = (0..depth).map(|j| j * base_depth / depth.max(1)).collect();
        Self { depth, sites }
    }

    pub fn validate(&self, base_depth: usize) -> Result<()> {
        if self.sites.len() != self.depth {
            return Err(Error::Config(format!(
                "branch depth {} but {} injection sites",
                self.depth,
                self.sites.len()
            )));
        }
        if self.depth > base_depth {
            return Err(Error::Config("branch deeper than backbone".into()));
        }
        let sorted = self.sites.windows(2).all(|w| w[0] < w[1]);
        if !sorted || self.sites.iter().any(|&s| s >= base_depth) {
            return Err(Error::Config(format!(
                "injection sites {:?} must be distinct, sorted and below {base_depth}",
                self.sites
            )));
        }
        Ok(())
    }
}

/// Creates the branch from the backbone: blocks copied from the first
/// backbone blocks, input projection copied with the extra foreground and
/// mask rows zeroed, gates zeroed.
pub fn init_branch(store: &mut ParamStore<f32>, cfg: &DiTConfig, branch: &BranchConfig) -> Result<()> {
    branch.validate(cfg.depth)?;
    if store.contains(&format!("{BRANCH_PREFIX}in_proj.w")) {
        return Err(Error::Stage("control branch already attached".into()));
    }
    let c = cfg.latent_channels();
    let d = cfg.dim;
    let base_w = store.get("backbone.in_proj.w")?.clone();
    let mut w = base_w.data().to_vec();
    w.extend(std::iter::repeat_n(0.0, (c + 1) * d));
    store.insert(format!("{BRANCH_PREFIX}in_proj.w"), Tensor::new([2 * c + 1, d], w)?);
    let base_b = store.get("backbone.in_proj.b")?.clone();
    store.insert(format!("{BRANCH_PREFIX}in_proj.b"), base_b);
    for j in 0..branch.depth {
        for (suffix, _, _) in block_linears(cfg) {
            for p in ["w", "b"] {
                let src = store.get(&format!("backbone.blocks.{j}.{suffix}.{p}"))?.clone();
                store.insert(format!("{BRANCH_PREFIX}blocks.{j}.{suffix}.{p}"), src);
            }
        }
        store.insert(format!("{BRANCH_PREFIX}gates.{j}.w"), Tensor::zeros([d, d]));
        store.insert(format!("{BRANCH_PREFIX}gates.{j}.b"), Tensor::zeros([d]));
    }
    Ok(())
}

/// Gated residuals `(site, [n, D])` from the branch. The branch attends over
/// target tokens only.
#[allow(clippy::too_many_arguments)]
pub fn control_branch_forward<E: Element>(
    g: &mut Graph<'_, E>,
    cfg: &DiTConfig,
    branch: &BranchConfig,
    z_t: Var,
    z_f: Var,
    z_m: Var,
    target_pe: Var,
    cond: Var,
) -> Result<Vec<(usize, Var)>> {
    let x = channel_concat(g, z_t, z_f, z_m)?;
    let x = lora_linear(g, &format!("{BRANCH_PREFIX}in_proj"), x, E::zero())?;
    let mut x = g.tape.add(x, target_pe)?;
    let mut out = Vec::with_capacity(branch.depth);
    for (j, &site) in branch.sites.iter().enumerate() {
        x = dit_block(
            g,
            &format!("{BRANCH_PREFIX}blocks.{j}"),
            x,
            cond,
            cfg.heads,
            None,
            E::zero(),
        )?;
        let r = lora_linear(g, &format!("{BRANCH_PREFIX}gates.{j}"), x, E::zero())?;
        out.push((site, r));
    }
    Ok(out)
}

/// Backbone linear layers that receive adapters: every linear layer inside
/// every backbone block.
pub fn lora_targets(cfg: &DiTConfig) -> Vec<(String, usize, usize)> {
    (0..cfg.depth)
        .flat_map(|i| {
            block_linears(cfg)
                .into_iter()
                .map(move |(s, fi, fo)| (format!("backbone.blocks.{i}.{s}"), fi, fo))
        })
        .collect()
}

/// Registers a rank-`rank` adapter on each target: down-projection random,
/// up-projection zero. Base weights are untouched.
pub fn lora_wrap(
    store: &mut ParamStore<f32>,
    targets: &[(String, usize, usize)],
    rank: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if store.names().any(|n| n.starts_with(LORA_PREFIX)) {
        return Err(Error::Stage("model is already LoRA-wrapped".into()));
    }
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    let mut init = Init { rng };
    for (name, fan_in, fan_out) in targets {
        store.get(&format!("{name}.w"))?;
        let down = init.normal(&[*fan_in, rank], 1.0 / (*fan_in as f32).sqrt());
        store.insert(format!("{LORA_PREFIX}{name}.down"), down);
        store.insert(format!("{LORA_PREFIX}{name}.up"), Tensor::zeros([rank, *fan_out]));
    }
    Ok(())
}
