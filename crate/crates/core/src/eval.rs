//! Metrics and the benchmark harness.

use std::fmt::Write as _;

use crate::codec::{ImageRaster, Mask};
use crate::error::{Error, Result};
use crate::model::{Model, Stage};
use crate::sampler::{generate, SampleRequest, SweepAxis};
use crate::synth::{canonical_background, PromptLabel, Sample, NUM_CLASSES};

/// RGB distance below which a pixel counts as product-colored.
pub const SEGMENT_THRESHOLD: f32 = 0.15;
pub const FEATURE_BLOCKS: usize = 4;
pub const HISTOGRAM_BINS: usize = 8;
/// PSNR reported for an exact match.
pub const PSNR_CAP: f64 = 100.0;

fn check_extents(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// `1 - |gen \ gt| / |gt|`. Can go negative when the generated product
/// spills far outside the ground truth; an empty `gen` scores 1.
pub fn object_consistency(gen: &Mask, gt: &Mask) -> Result<f64> {
    check_extents((gen.height, gen.width), (gt.height, gt.width), "object consistency")?;
    let area = gt.area();
    if area == 0 {
        return Err(Error::Value("ground-truth product mask is empty".into()));
    }
    let outside = gen
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(&g, &t)| g > 0.5 && t <= 0.5)
        .count();
    Ok(1.0 - outside as f64 / area as f64)
}

/// Pixels within [`SEGMENT_THRESHOLD`] of `color`.
pub fn segment_product(image: &ImageRaster, color: [f32; 3]) -> Mask {
    let mut m = Mask::zeros(image.height, image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            let p = image.pixel(y, x);
            let d2: f32 = (0..3).map(|c| (p[c] - color[c]).powi(2)).sum();
            m.set(y, x, d2.sqrt() < SEGMENT_THRESHOLD);
        }
    }
    m
}

/// Block-mean grid followed by per-channel histograms, over pixels where
/// `exclude` is off. Fully excluded blocks contribute zeros.
pub fn similarity_features(image: &ImageRaster, exclude: &Mask) -> Result<Vec<f64>> {
    check_extents((image.height, image.width), (exclude.height, exclude.width), "features")?;
    let b = FEATURE_BLOCKS;
    let mut sums = vec![0.0f64; b * b * 3];
    let mut counts = vec![0usize; b * b];
    let mut hist = vec![0.0f64; 3 * HISTOGRAM_BINS];
    let mut kept = 0usize;
    for y in 0..image.height {
        for x in 0..image.width {
            if exclude.get(y, x) {
                continue;
            }
            kept += 1;
            let cell = (y * b / image.height) * b + x * b / image.width;
            counts[cell] += 1;
            let p = image.pixel(y, x);
            for c in 0..3 {
                let v = p[c].clamp(0.0, 1.0);
                sums[cell * 3 + c] += v as f64;
                let bin = ((v * HISTOGRAM_BINS as f32) as usize).min(HISTOGRAM_BINS - 1);
                hist[c * HISTOGRAM_BINS + bin] += 1.0;
            }
        }
    }
    if kept == 0 {
        return Err(Error::Value("exclusion covers the whole image".into()));
    }
    for (cell, &n) in counts.iter().enumerate() {
        for c in 0..3 {
            if n > 0 {
                sums[cell * 3 + c] /= n as f64;
            }
        }
    }
    sums.extend(hist.iter().map(|h| h / kept as f64));
    Ok(sums)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of [`similarity_features`] of both images.
pub fn reference_similarity(gen: &ImageRaster, reference: &ImageRaster, exclude: &Mask) -> Result<f64> {
    check_extents((gen.height, gen.width), (reference.height, reference.width), "reference similarity")?;
    Ok(cosine(
        &similarity_features(gen, exclude)?,
        &similarity_features(reference, exclude)?,
    ))
}

/// Nearest canonical background class by [`reference_similarity`]; ties go
/// to the lowest class id.
pub fn classify_background(image: &ImageRaster, exclude: &Mask) -> Result<PromptLabel> {
    let feats = similarity_features(image, exclude)?;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for k in 0..NUM_CLASSES {
        let label = PromptLabel::new(k)?;
        let canon = canonical_background(label, image.height);
        let s = cosine(&feats, &similarity_features(&canon, exclude)?);
        if s > best.0 {
            best = (s, k);
        }
    }
    PromptLabel::new(best.1)
}

/// 1 when the generated background classifies as `label`.
pub fn prompt_accuracy(gen: &ImageRaster, label: PromptLabel, exclude: &Mask) -> Result<u8> {
    Ok(u8::from(classify_background(gen, exclude)? == label))
}

/// PSNR in dB over the pixels of `region`, capped at [`PSNR_CAP`].
pub fn masked_psnr(a: &ImageRaster, b: &ImageRaster, region: &Mask) -> Result<f64> {
    check_extents((a.height, a.width), (b.height, b.width), "psnr")?;
    check_extents((a.height, a.width), (region.height, region.width), "psnr")?;
    let mut se = 0.0f64;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if !region.get(y, x) {
                continue;
            }
            let (p, q) = (a.pixel(y, x), b.pixel(y, x));
            for c in 0..3 {
                se += ((p[c] - q[c]) as f64).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::Value("PSNR region is empty".into()));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    T2I,
    TR2I,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::T2I => "T2I",
            Mode::TR2I => "TR2I",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkOptions {
    pub mode: Mode,
    pub steps: usize,
    /// Sample `i` is generated with seed `seed + i`.
    pub seed: u64,
    pub sweep: Option<(SweepAxis, Vec<f32>)>,
    /// Seeds the checkpoint was trained on; overlap with the eval set is an
    /// error.
    pub train_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub seed: u64,
    pub object_consistency: f64,
    pub psnr: f64,
    pub prompt_correct: u8,
    /// Similarity to the provided reference with it present and dropped
    /// (TR2I mode only).
    pub reference_similarity: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub values: Vec<f32>,
    /// `per_sample[i][k]`: sample `i` at `values[k]`.
    pub per_sample: Vec<Vec<f64>>,
    pub means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    pub samples: Vec<SampleMetrics>,
    pub mean_object_consistency: f64,
    pub mean_psnr: f64,
    pub prompt_accuracy: f64,
    pub mean_reference_similarity: Option<(f64, f64)>,
    pub sweep: Option<SweepReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Samples whose similarity with the reference beats the dropped run.
    pub fn reference_improved(&self) -> usize {
        self.samples
            .iter()
            .filter_map(|s| s.reference_similarity)
            .filter(|(with, without)| with > without)
            .count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}   samples: {}", self.mode, self.samples.len());
        let _ = writeln!(out, "{:<32} {:>10}", "metric", "value");
        for (k, v) in self.metrics() {
            let _ = writeln!(out, "{k:<32} {v:>10.4}");
        }
        if let Some(sw) = &self.sweep {
            let axis = match sw.axis {
                SweepAxis::Lora => "lora",
                SweepAxis::Attention => "attention",
            };
            let _ = writeln!(out, "\nsweep ({axis} scale)");
            let _ = writeln!(out, "{:<10} {:>12}", "value", "ref_sim");
            for (v, m) in sw.values.iter().zip(&sw.means) {
                let _ = writeln!(out, "{v:<10.3} {m:>12.5}");
            }
        }
        let _ = writeln!(
            out,
            "\nnote: object consistency only counts generated product pixels outside the \
             ground-truth mask, so an image with no product at all scores 1.0."
        );
        out
    }

    /// `metric<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.metrics() {
            let _ = writeln!(out, "{k}\t{v}");
        }
        if let Some(sw) = &self.sweep {
            for (v, m) in sw.values.iter().zip(&sw.means) {
                let _ = writeln!(out, "sweep_{v}\t{m}");
            }
        }
        out
    }

    fn metrics(&self) -> Vec<(String, f64)> {
        let mut m = vec![
            ("object_consistency".to_string(), self.mean_object_consistency),
            ("foreground_psnr_db".to_string(), self.mean_psnr),
            ("prompt_accuracy".to_string(), self.prompt_accuracy),
        ];
        if let Some((with, without)) = self.mean_reference_similarity {
            m.push(("reference_similarity".into(), with));
            m.push(("reference_similarity_dropped".into(), without));
            m.push(("reference_improved_count".into(), self.reference_improved() as f64));
        }
        m
    }
}

/// Generates every sample of `eval_set` and aggregates the metrics.
pub fn run_benchmark(model: &Model, eval_set: &[Sample], opts: &BenchmarkOptions) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::Value("evaluation set is empty".into()));
    }
    if let Some(s) = eval_set.iter().find(|s| opts.train_seeds.contains(&s.seed)) {
        return Err(Error::Value(format!("evaluation seed {} was used for training", s.seed)));
    }
    if opts.mode == Mode::TR2I && model.stage != Stage::Reference {
        return Err(Error::Stage("TR2I evaluation needs a stage-2 checkpoint".into()));
    }
    let mut samples = Vec::with_capacity(eval_set.len());
    let mut sweep_rows = Vec::new();
    for (i, s) in eval_set.iter().enumerate() {
        let mut req = SampleRequest::new(s.foreground.clone(), s.mask.clone(), s.prompt, opts.seed + i as u64);
        req.steps = opts.steps;
        let exclude = s.altered_region();
        let base = generate(&req, model)?;
        let ref_sim = match opts.mode {
            Mode::T2I => None,
            Mode::TR2I => {
                let mut with = req.clone();
                with.reference = Some(s.reference.clone());
                let img = generate(&with, model)?;
                Some((
                    reference_similarity(&img, &s.reference, &exclude)?,
                    reference_similarity(&base, &s.reference, &exclude)?,
                ))
            }
        };
        let seg = segment_product(&base, s.product_color());
        samples.push(SampleMetrics {
            seed: s.seed,
            object_consistency: object_consistency(&seg, &s.mask)?,
            psnr: masked_psnr(&base, &s.target, &s.mask)?,
            prompt_correct: prompt_accuracy(&base, s.prompt, &exclude)?,
            reference_similarity: ref_sim,
        });
        if let Some((axis, values)) = &opts.sweep {
            let mut r = req.clone();
            r.reference = Some(s.reference.clone());
            let imgs = crate::sampler::sweep(&r, model, *axis, values)?;
            let row = imgs
                .iter()
                .map(|img| reference_similarity(img, &s.reference, &exclude))
                .collect::<Result<Vec<_>>>()?;
            sweep_rows.push(row);
        }
    }
    let sweep = opts.sweep.as_ref().map(|(axis, values)| SweepReport {
        axis: *axis,
        values: values.clone(),
        means: (0..values.len())
            .map(|k| mean(sweep_rows.iter().map(|r| r[k])))
            .collect(),
        per_sample: sweep_rows,
    });
    let refs: Vec<(f64, f64)> = samples.iter().filter_map(|s| s.reference_similarity).collect();
    Ok(EvalReport {
        mode: opts.mode,
        mean_object_consistency: mean(samples.iter().map(|s| s.object_consistency)),
        mean_psnr: mean(samples.iter().map(|s| s.psnr)),
        prompt_accuracy: mean(samples.iter().map(|s| s.prompt_correct as f64)),
        mean_reference_similarity: (!refs.is_empty())
            .then(|| (mean(refs.iter().map(|r| r.0)), mean(refs.iter().map(|r| r.1)))),
        sweep,
        samples,
    })
}
