//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The process fails if any
//! criterion fails, except criteria listed in `KNOWN_DEFECTS`, whose failure
//! is reported but expected (see the README).
//!
//! Set `BGINPAINT_ACCEPTANCE_CACHE=<dir>` to reuse trained checkpoints across
//! runs; they are keyed by the full training configuration.

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::Instant;

use bginpaint_core::checkpoint::Checkpoint;
use bginpaint_core::codec::Mask;
use bginpaint_core::conditioning::{control_branch_forward, lora_linear, BranchConfig};
use bginpaint_core::dit::{
    assign_positions, attention, build_scale_matrix, dit_block, positional_encode, reference_position,
    DiTConfig,
};
use bginpaint_core::eval::{object_consistency, run_benchmark, BenchmarkOptions, EvalReport, Mode};
use bginpaint_core::model::{forward, ForwardOptions, Inputs, Model, ModelConfig, ReferenceTokens, Stage};
use bginpaint_core::params::{Graph, Init, ParamStore, Trainable};
use bginpaint_core::sampler::{generate_detailed, SampleRequest, SweepAxis};
use bginpaint_core::synth::{self, Sample};
use bginpaint_core::trainer::{prepare, train, LatentBundle, TrainConfig};
use bginpaint_tensor::{grad_check_coords, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Criteria whose failure is expected; see the README for the analysis.
const KNOWN_DEFECTS: &[u32] = &[3];

// Desk-scale training setup for criteria 7-10.
const TRAIN_RECORDS: usize = 2000;
const TRAIN_DATA_SEED: u64 = 1;
const HELD_OUT_RECORDS: usize = 200;
const HELD_OUT_SEED: u64 = 99;
const REFERENCE_EVAL_RECORDS: usize = 50;
const DESK_DIM: usize = 64;
const DESK_DEPTH: usize = 4;
const PRETRAIN_STEPS: usize = 3000;
const STAGE1_STEPS: usize = 8000;
const STAGE2_STEPS: usize = 6000;
const LEARNING_RATE: f64 = 4e-4;
const EVAL_EULER_STEPS: usize = 20;
const SWEEP: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

static NOTHING: Trainable = Trainable::Nothing;

fn desk_config() -> ModelConfig {
    ModelConfig {
        dit: DiTConfig {
            dim: DESK_DIM,
            depth: DESK_DEPTH,
            ..DiTConfig::default()
        },
        branch: BranchConfig::evenly_spaced(2, DESK_DEPTH),
        ..ModelConfig::default()
    }
}

fn randomize(store: &mut ParamStore<f32>, prefix: &str, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, Init { rng: &mut *rng }.normal(&shape, 0.2));
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn random_inputs(cfg: &ModelConfig, rng: &mut ChaCha8Rng, reference: bool) -> Inputs<f32> {
    let d = &cfg.dit;
    let n = d.target_tokens();
    let c = d.latent_channels();
    let mask = Tensor::new([n, 1], (0..n).map(|_| f32::from(u8::from(rng.gen_bool(0.3)))).collect()).unwrap();
    let (h, w) = (rng.gen_range(d.grid_h / 2..=d.grid_h), rng.gen_range(d.grid_w / 2..=d.grid_w));
    Inputs {
        z_t: random_tensor(&[n, c], rng),
        class: rng.gen_range(0..d.num_classes),
        t: rng.gen(),
        foreground: Some((random_tensor(&[n, c], rng), mask)),
        reference: reference.then(|| ReferenceTokens {
            tokens: random_tensor(&[h * w, c], rng),
            h,
            w,
        }),
    }
}

fn criterion_1() -> Verdict {
    let cfg = desk_config();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut base = Model::init(cfg.clone(), 1).unwrap();
    randomize(&mut base.params, "backbone.", &mut rng);
    let mut with_branch = base.clone();
    with_branch.attach_conditioning().unwrap();
    let opts = ForwardOptions::default();
    let mut equal = 0;
    for _ in 0..20 {
        let inputs = random_inputs(&cfg, &mut rng, false);
        let a = base.predict(&inputs, &opts).unwrap();
        let b = with_branch.predict(&inputs, &opts).unwrap();
        equal += usize::from(a.bit_eq(&b));
    }
    verdict(equal == 20, format!("{equal}/20 inputs bitwise equal"))
}

fn criterion_2() -> Verdict {
    let cfg = desk_config();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut m = Model::init(cfg.clone(), 2).unwrap();
    randomize(&mut m.params, "backbone.", &mut rng);
    m.attach_conditioning().unwrap();
    randomize(&mut m.params, "branch.", &mut rng);
    let mut wrapped = m.clone();
    wrapped.lora_wrap(3).unwrap();
    let mut equal = 0;
    for k in 0..20 {
        let inputs = random_inputs(&cfg, &mut rng, k % 2 == 0);
        let opts = ForwardOptions {
            lora_scale: 1.0,
            attn_scale: inputs.reference.as_ref().map(|_| 0.5),
        };
        let a = m.predict(&inputs, &opts).unwrap();
        let b = wrapped.predict(&inputs, &opts).unwrap();
        equal += usize::from(a.bit_eq(&b));
    }
    verdict(equal == 20, format!("{equal}/20 inputs bitwise equal"))
}

/// Single attention layer with random weights, for sequence-level checks.
fn attention_store(dim: usize, rng: &mut ChaCha8Rng) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert("a.qkv.w", random_tensor(&[dim, 3 * dim], rng));
    s.insert("a.qkv.b", random_tensor(&[3 * dim], rng));
    s.insert("a.attn_out.w", random_tensor(&[dim, dim], rng));
    s.insert("a.attn_out.b", random_tensor(&[dim], rng));
    s
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut ones_equal = 0;
    let mut worst_deleted = 0.0f64;
    let mut worst_rescaled = 0.0f64;
    for _ in 0..20 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let dim = heads * 4 * rng.gen_range(1..=2);
        let (m, n, l) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
        let store = attention_store(dim, &mut rng);
        let x = random_tensor(&[m + n + l, dim], &mut rng);
        let mut g = Graph::new(&store, &NOTHING);
        let xv = g.constant(x);

        let plain = attention(&mut g, "a", xv, heads, None, 1.0).unwrap();
        let ones = g.constant(build_scale_matrix(m, n, l, 1.0).unwrap().materialize());
        let modulated = attention(&mut g, "a", xv, heads, Some(ones), 1.0).unwrap();
        ones_equal += usize::from(g.value(plain).bit_eq(g.value(modulated)));

        let zero = g.constant(build_scale_matrix(m, n, l, 0.0).unwrap().materialize());
        let s0 = attention(&mut g, "a", xv, heads, Some(zero), 1.0).unwrap();
        let kept = g.tape.slice(xv, 0, 0, m + n).unwrap();
        let deleted = attention(&mut g, "a", kept, heads, None, 1.0).unwrap();
        let s0_rows = g.tape.slice(s0, 0, 0, m + n).unwrap();
        worst_deleted = worst_deleted.max(g.value(s0_rows).max_abs_diff(g.value(deleted)));
        worst_rescaled = worst_rescaled.max(rescaled_gap(&g, &store, xv, m + n, heads));
    }
    let pass = ones_equal == 20 && worst_deleted < 1e-6;
    verdict(
        pass,
        format!(
            "all-ones: {ones_equal}/20 bitwise equal; s=0 vs reference deleted: max diff {worst_deleted:.3e} \
             (tolerance 1e-6); unnormalized rows differ from deletion exactly by the retained softmax mass: \
             max gap after per-head rescaling {worst_rescaled:.1e}"
        ),
    )
}

/// Checks the exact relation between s = 0 and deletion on single-head
/// probabilities: kept-column weights are unchanged, so each row of the
/// modulated probabilities equals the deleted row times its retained mass.
fn rescaled_gap(g: &Graph<'_, f32>, store: &ParamStore<f32>, xv: Var, keep: usize, heads: usize) -> f64 {
    let x = g.value(xv);
    let dim = x.shape()[1];
    let hd = dim / heads;
    let w = store.get("a.qkv.w").unwrap();
    let b = store.get("a.qkv.b").unwrap();
    let len = x.shape()[0];
    let proj = |r: usize, col: usize| -> f64 {
        (0..dim).map(|i| x.data()[r * dim + i] as f64 * w.data()[i * 3 * dim + col] as f64).sum::<f64>()
            + b.data()[col] as f64
    };
    let mut worst = 0.0f64;
    for h in 0..heads {
        for r in 0..keep {
            let logits: Vec<f64> = (0..len)
                .map(|c| (0..hd).map(|i| proj(r, h * hd + i) * proj(c, dim + h * hd + i)).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let full: f64 = e.iter().sum();
            let kept: f64 = e[..keep].iter().sum();
            for c in 0..keep {
                let modulated = e[c] / full;
                let deleted = e[c] / kept;
                worst = worst.max((modulated - deleted * (kept / full)).abs());
            }
        }
    }
    worst
}

fn criterion_4() -> Verdict {
    let mut cells = 0usize;
    let mut bad = 0usize;
    for m in 0..=4 {
        for n in 0..=4 {
            for l in 0..=4 {
                for s in [0.0f32, 0.3, 1.0] {
                    let size = m + n + l;
                    let mut painted = vec![vec![1.0f32; size]; size];
                    // Cross blocks between the reference and everything else.
                    for r in 0..m + n {
                        for c in m + n..size {
                            painted[r][c] = s;
                            painted[c][r] = s;
                        }
                    }
                    let t = build_scale_matrix(m, n, l, s).unwrap().materialize::<f32>();
                    for r in 0..size {
                        for c in 0..size {
                            cells += 1;
                            bad += usize::from(t.data()[r * size + c].to_bits() != painted[r][c].to_bits());
                        }
                    }
                }
            }
        }
    }
    verdict(bad == 0, format!("{bad} of {cells} cells differ"))
}

fn criterion_5() -> Verdict {
    let mut collisions = 0usize;
    let mut spot_errors = 0usize;
    for h in 1..=16 {
        for w in 1..=16 {
            spot_errors += usize::from(reference_position(h, w, 0, 0) != (h, w));
            spot_errors += usize::from(reference_position(h, w, 3, 5) != (h + 3, w + 5));
            for h_r in 1..=16 {
                for w_r in 1..=16 {
                    let p = assign_positions(h, w, h_r, w_r, 1);
                    let mut seen = HashSet::with_capacity(h * w + h_r * w_r);
                    collisions += p.target.iter().chain(&p.reference).filter(|q| !seen.insert(**q)).count();
                    if h_r > 3 && w_r > 5 {
                        spot_errors += usize::from(p.reference[3 * w_r + 5] != (h + 3, w + 5));
                    }
                    spot_errors += usize::from(p.reference[0] != (h, w));
                }
            }
        }
    }
    verdict(
        collisions == 0 && spot_errors == 0,
        format!("{collisions} collisions, {spot_errors} spot-value errors over 65536 layouts"),
    )
}

// Gradient checks, all in f64.

fn tiny_f64_model(seed: u64) -> (ModelConfig, ParamStore<f64>) {
    let cfg = ModelConfig {
        dit: DiTConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            prompt_len: 2,
            grid_h: 2,
            grid_w: 2,
            ..DiTConfig::default()
        },
        branch: BranchConfig::evenly_spaced(2, 2),
        lora_rank: 2,
        ..ModelConfig::default()
    };
    let mut m = Model::init(cfg.clone(), seed).unwrap();
    m.attach_conditioning().unwrap();
    m.lora_wrap(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize(&mut m.params, "", &mut rng);
    (cfg, m.params.cast())
}

fn f64_inputs(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Inputs<f64> {
    let i = random_inputs(cfg, rng, true);
    Inputs {
        z_t: i.z_t.cast(),
        class: i.class,
        t: i.t,
        foreground: i.foreground.map(|(a, b)| (a.cast(), b.cast())),
        reference: i.reference.map(|r| ReferenceTokens {
            tokens: r.tokens.cast(),
            h: r.h,
            w: r.w,
        }),
    }
}

fn core_err(e: bginpaint_core::Error) -> TensorError {
    TensorError::InvalidShape {
        op: "model",
        shape: vec![],
        msg: e.to_string(),
    }
}

/// Runs `body` on a graph whose tape is the gradient checker's tape.
fn on_tape<R>(tape: &mut Tape<f64>, store: &ParamStore<f64>, body: impl FnOnce(&mut Graph<'_, f64>) -> R) -> R {
    let mut g = Graph::new(store, &NOTHING);
    std::mem::swap(&mut g.tape, tape);
    let out = body(&mut g);
    std::mem::swap(&mut g.tape, tape);
    out
}

/// Weighted sum plus mean square, so every output coordinate matters.
fn scalarize(tape: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
    let w: Vec<f64> = (0..tape.value(y).len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = tape.constant(Tensor::new(tape.shape(y).to_vec(), w)?);
    let p = tape.mul(y, w)?;
    let s = tape.sum(p)?;
    let sq = tape.mul(y, y)?;
    let m = tape.mean(sq)?;
    tape.add(s, m)
}

fn coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= 96 {
        (0..len).collect()
    } else {
        (0..96).map(|_| rng.gen_range(0..len)).collect()
    }
}

type Check = (&'static str, Box<dyn Fn(u64) -> f64>);

fn input_check(
    shape: &'static [usize],
    f: impl Fn(&mut Tape<f64>, Var, &ParamStore<f64>, &ModelConfig) -> Result<Var, TensorError> + 'static,
) -> Box<dyn Fn(u64) -> f64> {
    Box::new(move |seed| {
        let (cfg, store) = tiny_f64_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let x = random_tensor(shape, &mut rng).cast::<f64>();
        let cs = coords(x.len(), &mut rng);
        let g = |tape: &mut Tape<f64>, v: Var| -> Result<Var, TensorError> {
            let y = f(tape, v, &store, &cfg)?;
            scalarize(tape, y)
        };
        grad_check_coords(&g, &x, 1e-5, cs).unwrap()
    })
}

/// Gradient of the full model's output with respect to one parameter.
fn param_check(name: &'static str, lora_scale: f64, attn_scale: Option<f32>) -> Box<dyn Fn(u64) -> f64> {
    Box::new(move |seed| {
        let (cfg, store) = tiny_f64_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let inputs = f64_inputs(&cfg, &mut rng);
        let point = store.get(name).unwrap().clone();
        let cs = coords(point.len(), &mut rng);
        let opts = ForwardOptions {
            lora_scale,
            attn_scale,
        };
        let g = |tape: &mut Tape<f64>, v: Var| -> Result<Var, TensorError> {
            let y = on_tape(tape, &store, |g| {
                g.bind(name, v)?;
                forward(&cfg, g, &inputs, &opts).map(|o| o.velocity)
            })
            .map_err(core_err)?;
            scalarize(tape, y)
        };
        grad_check_coords(&g, &point, 1e-5, cs).unwrap()
    })
}

fn criterion_6() -> Verdict {
    let checks: Vec<Check> = vec![
        ("linear", input_check(&[3, 8], |t, x, s, _| on_tape(t, s, |g| lora_linear(g, "backbone.t_mlp1", x, 1.0)).map_err(core_err))),
        ("layer norm", input_check(&[3, 8], |t, x, _, _| t.layer_norm(x))),
        ("gelu", input_check(&[3, 8], |t, x, _, _| t.gelu(x))),
        ("softmax", input_check(&[3, 8], |t, x, _, _| t.softmax(x))),
        ("matmul", input_check(&[3, 8], |t, x, _, _| {
            let w = t.constant(Tensor::new([8, 5], (0..40).map(|i| (i as f64 * 0.37).sin()).collect())?);
            t.matmul(x, w)
        })),
        ("embedding", input_check(&[16, 8], |t, x, _, _| t.embedding(x, &[3, 0, 3, 15]))),
        ("mse", input_check(&[4, 12], |t, x, _, _| {
            let target = t.constant(Tensor::new([4, 12], (0..48).map(|i| (i as f64 * 0.11).cos()).collect())?);
            t.mse(x, target)
        })),
        ("attention", input_check(&[7, 8], |t, x, s, _| {
            on_tape(t, s, |g| attention(g, "backbone.blocks.0", x, 2, None, 1.0)).map_err(core_err)
        })),
        ("full block", input_check(&[7, 8], |t, x, s, _| {
            on_tape(t, s, |g| {
                let cond = g.constant(Tensor::new([1, 8], (0..8).map(|i| (i as f64).sin()).collect())?);
                dit_block(g, "backbone.blocks.1", x, cond, 2, None, 1.0)
            })
            .map_err(core_err)
        })),
        ("S-modulated attention", input_check(&[7, 8], |t, x, s, _| {
            on_tape(t, s, |g| {
                let sm = g.constant(build_scale_matrix(2, 2, 3, 0.3)?.materialize());
                attention(g, "backbone.blocks.0", x, 2, Some(sm), 1.0)
            })
            .map_err(core_err)
        })),
        ("S-modulated attention (weights)", param_check("backbone.blocks.0.qkv.w", 1.0, Some(0.3))),
        ("control branch input", input_check(&[4, 12], |t, x, s, cfg| {
            on_tape(t, s, |g| {
                let d = &cfg.dit;
                let zf = g.constant(Tensor::new([4, 12], (0..48).map(|i| (i as f64 * 0.3).sin()).collect())?);
                let zm = g.constant(Tensor::new([4, 1], vec![1.0, 0.0, 0.0, 1.0])?);
                let pe = g.constant(positional_encode(&assign_positions(2, 2, 0, 0, 1).target, d.dim));
                let cond = g.constant(Tensor::new([1, 8], (0..8).map(|i| (i as f64).cos()).collect())?);
                let res = control_branch_forward(g, d, &cfg.branch, x, zf, zm, pe, cond)?;
                let parts: Vec<Var> = res.iter().map(|(_, r)| *r).collect();
                Ok(g.tape.concat(&parts, 1)?)
            })
            .map_err(core_err)
        })),
        ("gate", param_check("branch.gates.1.w", 1.0, None)),
        ("gate bias", param_check("branch.gates.0.b", 1.0, None)),
        ("LoRA down", param_check("lora.backbone.blocks.1.mlp_in.down", 0.7, Some(1.0))),
        ("LoRA up", param_check("lora.backbone.blocks.0.qkv.up", 0.7, Some(0.5))),
        ("adaptive norm", param_check("backbone.blocks.1.ada.w", 1.0, None)),
        ("prompt embedding", param_check("backbone.prompt_embed", 1.0, None)),
        ("output head", param_check("backbone.final_ada.w", 1.0, None)),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for (name, check) in &checks {
        for seed in 0..10 {
            let e = check(seed);
            if e > worst.0 || e.is_nan() {
                worst = (e, name);
            }
        }
    }
    verdict(
        worst.0 < 1e-3,
        format!("{} paths x 10 points; worst relative error {:.2e} ({})", checks.len(), worst.0, worst.1),
    )
}

// Desk-scale training, shared by criteria 7-10.

struct Trained {
    stage1: Checkpoint,
    stage2: Checkpoint,
    train_seeds: Vec<u64>,
    held_out: Vec<Sample>,
}

fn cache_path(tag: &str, cfg: &TrainConfig, data: &[LatentBundle]) -> Option<PathBuf> {
    let dir = std::env::var_os("BGINPAINT_ACCEPTANCE_CACHE")?;
    // Key on the data itself too, so generator changes invalidate the cache.
    let mut h = Sha256::new();
    h.update(format!("{tag}|{cfg:?}").as_bytes());
    for b in data {
        h.update(format!("{b:?}").as_bytes());
    }
    let hash = h.finalize();
    let hex: String = hash.iter().take(8).map(|b| format!("{b:02x}")).collect();
    std::fs::create_dir_all(&dir).ok()?;
    Some(PathBuf::from(dir).join(format!("{tag}-{hex}.ckpt")))
}

fn train_cached(tag: &str, cfg: &TrainConfig, data: &[LatentBundle], init: Option<Checkpoint>) -> Checkpoint {
    let path = cache_path(tag, cfg, data);
    if let Some(p) = &path {
        if let Ok(ck) = Checkpoint::load(p) {
            eprintln!("  {tag}: loaded cached checkpoint {}", p.display());
            return ck;
        }
    }
    let t0 = Instant::now();
    let mut window = Vec::new();
    let ck = train(cfg, data, init, &mut |l| {
        window.push(l.loss);
        if window.len() == 250 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            eprintln!(
                "  {tag}: stage {} step {:>5} loss {mean:.4} ({:.0}s)",
                l.stage.as_u32(),
                l.step + 1,
                t0.elapsed().as_secs_f64()
            );
            window.clear();
        }
    })
    .expect("training")
    .checkpoint;
    if let Some(p) = &path {
        ck.save(p).expect("cache write");
    }
    ck
}

fn desk_training() -> Trained {
    let samples = synth::generate(TRAIN_RECORDS, TRAIN_DATA_SEED);
    let data = prepare(&samples, 2).unwrap();
    let cfg1 = TrainConfig {
        stage: Stage::Inpaint,
        steps: STAGE1_STEPS,
        pretrain_steps: PRETRAIN_STEPS,
        lr: LEARNING_RATE,
        seed: 0,
        model: desk_config(),
        ..TrainConfig::default()
    };
    let stage1 = train_cached("stage1", &cfg1, &data, None);
    let cfg2 = TrainConfig {
        stage: Stage::Reference,
        steps: STAGE2_STEPS,
        pretrain_steps: 0,
        ..cfg1.clone()
    };
    let stage2 = train_cached("stage2", &cfg2, &data, Some(stage1.clone()));
    Trained {
        stage1,
        stage2,
        train_seeds: samples.iter().map(|s| s.seed).collect(),
        held_out: synth::generate(HELD_OUT_RECORDS, HELD_OUT_SEED),
    }
}

fn criterion_7(t: &Trained) -> Verdict {
    let opts = BenchmarkOptions {
        mode: Mode::T2I,
        steps: EVAL_EULER_STEPS,
        seed: 0,
        sweep: None,
        train_seeds: t.train_seeds.clone(),
    };
    let r = run_benchmark(&t.stage1.model(), &t.held_out, &opts).expect("benchmark");
    let pass = r.prompt_accuracy >= 0.8 && r.mean_psnr >= 20.0 && r.mean_object_consistency >= 0.9;
    verdict(
        pass,
        format!(
            "{} held-out samples: prompt accuracy {:.3} (>= 0.80), foreground PSNR {:.2} dB (>= 20), \
             object consistency {:.4} (>= 0.90)",
            r.samples.len(),
            r.prompt_accuracy,
            r.mean_psnr,
            r.mean_object_consistency
        ),
    )
}

fn reference_report(t: &Trained) -> EvalReport {
    let opts = BenchmarkOptions {
        mode: Mode::TR2I,
        steps: EVAL_EULER_STEPS,
        seed: 0,
        sweep: Some((SweepAxis::Attention, SWEEP.to_vec())),
        train_seeds: t.train_seeds.clone(),
    };
    run_benchmark(&t.stage2.model(), &t.held_out[..REFERENCE_EVAL_RECORDS], &opts).expect("benchmark")
}

fn criterion_8(r: &EvalReport) -> Verdict {
    let (with, without) = r.mean_reference_similarity.expect("TR2I report");
    let improved = r.reference_improved();
    let pass = with > without && improved >= 40;
    verdict(
        pass,
        format!(
            "mean similarity with reference {with:.5} vs dropped {without:.5}; {improved}/{} improved (>= 40)",
            r.samples.len()
        ),
    )
}

fn criterion_9(r: &EvalReport) -> Verdict {
    let sw = r.sweep.as_ref().expect("sweep");
    let steps: Vec<f64> = sw.means.windows(2).map(|w| w[1] - w[0]).collect();
    let inversions: Vec<f64> = steps.iter().filter(|d| **d < 0.0).map(|d| -d).collect();
    let pass = inversions.is_empty() || (inversions.len() == 1 && inversions[0] < 0.01);
    let means: Vec<String> = sw.values.iter().zip(&sw.means).map(|(v, m)| format!("{v}:{m:.5}")).collect();
    verdict(
        pass,
        format!("means over s_A {{{}}}; {} inversion(s)", means.join(", "), inversions.len()),
    )
}

fn criterion_10(t: &Trained) -> Verdict {
    let m1 = t.stage1.model();
    let m2 = t.stage2.model();
    let mut worst = 0.0f64;
    for (i, s) in t.held_out.iter().take(10).enumerate() {
        let mut req = SampleRequest::new(s.foreground.clone(), s.mask.clone(), s.prompt, 500 + i as u64);
        req.steps = EVAL_EULER_STEPS;
        let a = generate_detailed(&req, &m1).unwrap();
        req.lora_scale = 0.0;
        let b = generate_detailed(&req, &m2).unwrap();
        let d = a.latent.data.iter().zip(&b.latent.data).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
        let di = a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
        worst = worst.max(d).max(di);
    }
    verdict(worst <= 1e-6, format!("max |stage-2 at s_L=0 - stage-1| = {worst:.3e} over 10 requests"))
}

fn square_mask(top: usize, left: usize, side: usize) -> Mask {
    let mut m = Mask::zeros(16, 16);
    for y in top..top + side {
        for x in left..left + side {
            m.set(y, x, true);
        }
    }
    m
}

fn criterion_11() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let gen: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.3)).collect();
        let mut gt: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.3)).collect();
        gt[rng.gen_range(0..256)] = true;
        let mut outside = 0usize;
        let mut area = 0usize;
        for y in 0..16 {
            for x in 0..16 {
                let i = y * 16 + x;
                area += usize::from(gt[i]);
                outside += usize::from(gen[i] && !gt[i]);
            }
        }
        let want = 1.0 - outside as f64 / area as f64;
        let to_mask = |b: &[bool]| Mask::new(16, 16, b.iter().map(|&v| f32::from(u8::from(v))).collect()).unwrap();
        mismatches += usize::from(object_consistency(&to_mask(&gen), &to_mask(&gt)).unwrap() != want);
    }
    let gt = square_mask(3, 3, 10);
    let mut extra = gt.clone();
    let mut added = 0;
    'fill: for y in 0..16 {
        for x in 0..16 {
            if !extra.get(y, x) {
                extra.set(y, x, true);
                added += 1;
                if added == 50 {
                    break 'fill;
                }
            }
        }
    }
    let examples = [
        object_consistency(&gt, &gt).unwrap(),
        object_consistency(&extra, &gt).unwrap(),
        object_consistency(&Mask::zeros(16, 16), &gt).unwrap(),
    ];
    let pass = mismatches == 0 && examples == [1.0, 0.5, 1.0];
    verdict(
        pass,
        format!("{mismatches}/1000 brute-force mismatches; worked examples {examples:?} (want [1.0, 0.5, 1.0])"),
    )
}

/// Data generation, both training stages and sampling, from fixed seeds.
fn pipeline(root: &std::path::Path) -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<Vec<u8>>) {
    synth::write_dataset(64, &root.join("data"), 21).unwrap();
    let manifest = std::fs::read(root.join("data/manifest.tsv")).unwrap();
    let samples = synth::load_dataset(&root.join("data")).unwrap();
    let data = prepare(&samples, 2).unwrap();
    let model = ModelConfig {
        dit: DiTConfig {
            dim: 32,
            depth: 2,
            ..DiTConfig::default()
        },
        branch: BranchConfig::evenly_spaced(1, 2),
        ..ModelConfig::default()
    };
    let cfg1 = TrainConfig {
        stage: Stage::Inpaint,
        steps: 6,
        pretrain_steps: 4,
        batch_size: 4,
        seed: 5,
        model,
        ..TrainConfig::default()
    };
    let ck1 = train(&cfg1, &data, None, &mut |_| {}).unwrap().checkpoint;
    let p1 = root.join("ck1.bin");
    ck1.save(&p1).unwrap();
    let cfg2 = TrainConfig {
        stage: Stage::Reference,
        pretrain_steps: 0,
        ..cfg1
    };
    let ck2 = train(&cfg2, &data, Some(Checkpoint::load(&p1).unwrap()), &mut |_| {}).unwrap().checkpoint;
    let p2 = root.join("ck2.bin");
    ck2.save(&p2).unwrap();
    let m2 = Checkpoint::load(&p2).unwrap().model();
    let mut images = Vec::new();
    for (i, s) in samples.iter().take(3).enumerate() {
        let mut req = SampleRequest::new(s.foreground.clone(), s.mask.clone(), s.prompt, 40 + i as u64);
        req.steps = 4;
        req.reference = (i % 2 == 0).then(|| s.reference.clone());
        let img = generate_detailed(&req, &m2).unwrap().image;
        let path = root.join(format!("gen_{i}.png"));
        bginpaint_core::imageio::save_image(&img, &path).unwrap();
        images.push(std::fs::read(&path).unwrap());
    }
    (manifest, std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap(), images)
}

fn criterion_12() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    let reproducible = ra == rb;
    let ck = Checkpoint::load(&a.path().join("ck2.bin")).unwrap();
    let again = a.path().join("again.bin");
    ck.save(&again).unwrap();
    let round_trip = Checkpoint::load(&again).unwrap() == ck && std::fs::read(&again).unwrap() == ra.2;
    verdict(
        reproducible && round_trip,
        format!(
            "rerun byte-identical: {reproducible} (manifest, 2 checkpoints, {} images); save/load round trip bitwise: {round_trip}",
            ra.3.len()
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a filter that
    // excludes "acceptance" skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let t0 = Instant::now();
    let mut results: Vec<(u32, Verdict)> = Vec::new();
    let mut run = |id: u32, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        let status = match (v.pass, KNOWN_DEFECTS.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known defect)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {status:<4} {name}: {} [{:.1}s]", v.detail, t.elapsed().as_secs_f64());
        results.push((id, v));
    };
    run(1, "zero-init branch identity", &mut criterion_1);
    run(2, "zero-adapter identity", &mut criterion_2);
    run(3, "attention-modulation identity", &mut criterion_3);
    run(4, "scale-matrix oracle", &mut criterion_4);
    run(5, "positional offset", &mut criterion_5);
    run(6, "gradient integrity", &mut criterion_6);
    run(11, "object-consistency oracle", &mut criterion_11);
    run(12, "determinism and persistence", &mut criterion_12);
    eprintln!("training desk-scale model (stage 0/1 then 2)...");
    let trained = desk_training();
    run(7, "stage-1 desk-scale quality", &mut || criterion_7(&trained));
    let report = reference_report(&trained);
    run(8, "stage-2 reference effect", &mut || criterion_8(&report));
    run(9, "attention-scale monotonicity", &mut || criterion_9(&report));
    run(10, "LoRA-scale-0 reversion", &mut || criterion_10(&trained));

    results.sort_by_key(|(id, _)| *id);
    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(id, v)| !v.pass && !KNOWN_DEFECTS.contains(id))
        .map(|(id, _)| *id)
        .collect();
    let passed = results.iter().filter(|(_, v)| v.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s; unexpected failures: {unexpected:?}",
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
