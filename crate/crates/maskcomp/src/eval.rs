//! Evaluation bench: identity, style-consistency and aesthetic scoring of
//! compositor outputs, with edit-mask gating and an Overall Mean.
//!
//! Style and aesthetic metrics only count when the detected edit covers
//! more than the gate fraction of the image, so a method that fails to
//! edit cannot collect style credit for an untouched background.

use crate::curate::{crop_masked, style_score, Embedder, SemanticEmbedder, StyleEmbedder};
use crate::data::{load_sample, Image, SampleRecord};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image: {0}")]
    Image(#[from] crate::data::ImageError),
    #[error("curation: {0}")]
    Curate(#[from] crate::curate::CurateError),
    #[error("background {0}x{1} vs output {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Per-pixel max-channel difference that counts as an edit (of 255).
    pub pixel_threshold: u8,
    /// Minimum edited-area fraction for style/aesthetic metrics.
    pub gate_fraction: f64,
    /// Euler steps for model compositors.
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pixel_threshold: 8,
            gate_fraction: 0.20,
            sample_steps: 20,
            seed: 0,
        }
    }
}

/// Pixel-differencing edit detector: a pixel is edited when the largest
/// channel difference exceeds the threshold. Returns the mask and its
/// area fraction.
pub fn edit_mask(background: &Image, output: &Image, pixel_threshold: u8) -> Result<(Image, f64)> {
    if background.width() != output.width() || background.height() != output.height() {
        return Err(EvalError::SizeMismatch(
            background.width(),
            background.height(),
            output.width(),
            output.height(),
        ));
    }
    let (w, h) = (background.width(), background.height());
    let mut mask = Image::new(w, h, 1);
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let a = background.px(x, y);
            let b = output.px(x, y);
            let d = a
                .iter()
                .zip(b)
                .map(|(&p, &q)| p.abs_diff(q))
                .max()
                .unwrap_or(0);
            if d > pixel_threshold {
                mask.set_px(x, y, &[255]);
                count += 1;
            }
        }
    }
    Ok((mask, count as f64 / (w * h) as f64))
}

/// Banded sharpness (gradient energy peaking at a natural-image level, so
/// both blur and noise score low) plus colorfulness (opponent-channel
/// spread), averaged. A stated proxy with fixed normalizers, not a learned
/// aesthetic model.
pub fn aes_score(img: &Image) -> f64 {
    let (w, h) = (img.width(), img.height());
    let luma = |p: &[u8]| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
    let mut grad = 0.0;
    if w > 2 && h > 2 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let gx = luma(img.px(x + 1, y)) - luma(img.px(x - 1, y));
                let gy = luma(img.px(x, y + 1)) - luma(img.px(x, y - 1));
                grad += (gx * gx + gy * gy).sqrt() / 255.0;
            }
        }
        grad /= ((w - 2) * (h - 2)) as f64;
    }
    // Gamma-shaped band: 0 at zero energy, 1 at the target, decaying for
    // noise-level energy.
    let ratio = grad / 0.06;
    let sharpness = (ratio * (1.0 - ratio).exp()).clamp(0.0, 1.0);

    let n = (w * h) as f64;
    let mut rg = (0.0, 0.0);
    let mut yb = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = img.px(x, y);
            let a = p[0] as f64 - p[1] as f64;
            let b = 0.5 * (p[0] as f64 + p[1] as f64) - p[2] as f64;
            rg.0 += a;
            rg.1 += a * a;
            yb.0 += b;
            yb.1 += b * b;
        }
    }
    let var = |s: (f64, f64)| (s.1 / n - (s.0 / n) * (s.0 / n)).max(0.0);
    let colorfulness = ((var(rg).sqrt() + var(yb).sqrt()) / 255.0 / 0.35).clamp(0.0, 1.0);
    0.5 * sharpness + 0.5 * colorfulness
}

/// Per-sample metric row. `None` means gated out (or, for `clip_i`, a
/// failure to edit at all).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub sample_id: String,
    pub edit_fraction: f64,
    pub clip_i: Option<f64>,
    pub csd: Option<f64>,
    pub aes: Option<f64>,
}

/// The embedders the bench scores with. Identity deliberately leans on
/// structure: an inserted object is *supposed* to be re-rendered in the
/// scene's style, so palette-heavy similarity would punish the task
/// itself.
pub struct EvalEmbedders {
    pub identity: SemanticEmbedder,
    pub style: StyleEmbedder,
}

impl Default for EvalEmbedders {
    fn default() -> Self {
        EvalEmbedders {
            identity: SemanticEmbedder::dino_like(),
            style: StyleEmbedder,
        }
    }
}

/// Scores one output against its reference and background.
pub fn score_sample(
    reference: &Image,
    background: &Image,
    output: &Image,
    emb: &EvalEmbedders,
    cfg: &EvalConfig,
) -> Result<EvalRecord> {
    let (mask, fraction) = edit_mask(background, output, cfg.pixel_threshold)?;
    let mut rec = EvalRecord {
        method: String::new(),
        sample_id: String::new(),
        edit_fraction: fraction,
        clip_i: None,
        csd: None,
        aes: None,
    };
    if mask.mask_area() == 0 {
        // Failure to edit: everything gated out.
        return Ok(rec);
    }
    let edited = crop_masked(output, &mask)?;
    rec.clip_i = Some(emb.identity.similarity(reference, &edited));
    if fraction > cfg.gate_fraction && mask.mask_area() < mask.width() * mask.height() {
        rec.csd = Some(style_score(output, &mask, &emb.style)?);
        rec.aes = Some(aes_score(output));
    }
    Ok(rec)
}

/// Arithmetic mean of the three metric means.
pub fn overall_mean(clip_i: f64, csd: f64, aes: f64) -> f64 {
    (clip_i + csd + aes) / 3.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub n_samples: usize,
    pub n_gated_out: usize,
    pub n_failed: usize,
    pub clip_i: Option<f64>,
    pub csd: Option<f64>,
    pub aes: Option<f64>,
    pub overall: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub pixel_threshold: u8,
    pub gate_fraction: f64,
    pub tool_version: String,
    pub rows: Vec<MethodRow>,
    pub records: Vec<EvalRecord>,
}

impl BenchReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aligned plain-text table.
    pub fn text_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.3}"),
            None => "-".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "# pixel_threshold={} gate_fraction={} version={}\n",
            self.pixel_threshold, self.gate_fraction, self.tool_version
        ));
        out.push_str(&format!(
            "{:<24} {:>6} {:>7} {:>7} {:>7} {:>7} {:>8}\n",
            "method", "n", "gated", "clip-i", "csd", "aes", "overall"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>6} {:>7} {:>7} {:>7} {:>7} {:>8}\n",
                r.method,
                r.n_samples,
                r.n_gated_out,
                fmt(r.clip_i),
                fmt(r.csd),
                fmt(r.aes),
                fmt(r.overall),
            ));
        }
        out
    }

    /// Line-delimited machine-readable form: one JSON object per row, then
    /// one per sample record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// What a compositor sees for one benchmark pair: never the ground truth.
pub struct ComposeInput<'a> {
    pub sample_id: &'a str,
    pub reference: &'a Image,
    pub background: &'a Image,
    pub mask: &'a Image,
    pub seed: u64,
}

pub type CompositorFn<'a> = &'a dyn Fn(&ComposeInput) -> std::result::Result<Image, String>;

/// Paste the reference into the mask region, scaled to its bounding box.
/// No harmonization: the canonical baseline.
pub fn copy_paste_compositor(input: &ComposeInput) -> std::result::Result<Image, String> {
    let (bx, by, bw, bh) = input.mask.mask_bbox().map_err(|e| e.to_string())?;
    let side = bw.max(bh);
    let scaled = input.reference.resize_nearest(side, side);
    let mut out = input.background.clone();
    for y in 0..bh {
        for x in 0..bw {
            let (tx, ty) = (bx + x, by + y);
            if input.mask.mask_at(tx, ty) {
                let v = scaled.px(x, y).to_vec();
                out.set_px(tx, ty, &v);
            }
        }
    }
    Ok(out)
}

/// Runs every method over the manifest's records and assembles the report.
/// Per-sample records are sorted by (method, id); failures count as
/// gated-out for their method.
pub fn run_benchmark(
    base_dir: impl AsRef<Path>,
    records: &[SampleRecord],
    methods: &[(String, CompositorFn)],
    cfg: &EvalConfig,
    emb: &EvalEmbedders,
) -> Result<BenchReport> {
    let mut ordered: Vec<&SampleRecord> = records.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let mut all_records = Vec::new();
    let mut rows = Vec::new();
    for (name, compositor) in methods {
        let mut evals = Vec::new();
        let mut n_failed = 0usize;
        for r in &ordered {
            let s = load_sample(&base_dir, r)?;
            let input = ComposeInput {
                sample_id: &r.id,
                reference: &s.i_f,
                background: &s.i_bs,
                mask: &s.i_m,
                seed: derive_seed(cfg.seed, &[fnv(name), fnv(&r.id)]),
            };
            match compositor(&input) {
                Ok(output) => {
                    let mut rec = score_sample(&s.i_f, &s.i_bs, &output, emb, cfg)?;
                    rec.method = name.clone();
                    rec.sample_id = r.id.clone();
                    evals.push(rec);
                }
                Err(_) => {
                    n_failed += 1;
                    evals.push(EvalRecord {
                        method: name.clone(),
                        sample_id: r.id.clone(),
                        edit_fraction: 0.0,
                        clip_i: None,
                        csd: None,
                        aes: None,
                    });
                }
            }
        }
        let mean = |get: &dyn Fn(&EvalRecord) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = evals.iter().filter_map(get).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let clip_i = mean(&|r| r.clip_i);
        let csd = mean(&|r| r.csd);
        let aes = mean(&|r| r.aes);
        let overall = match (clip_i, csd, aes) {
            (Some(a), Some(b), Some(c)) => Some(overall_mean(a, b, c)),
            _ => None,
        };
        rows.push(MethodRow {
            method: name.clone(),
            n_samples: evals.len(),
            n_gated_out: evals.iter().filter(|e| e.csd.is_none()).count(),
            n_failed,
            clip_i,
            csd,
            aes,
            overall,
        });
        all_records.extend(evals);
    }
    all_records.sort_by(|a, b| (a.method.as_str(), a.sample_id.as_str()).cmp(&(b.method.as_str(), b.sample_id.as_str())));
    Ok(BenchReport {
        pixel_threshold: cfg.pixel_threshold,
        gate_fraction: cfg.gate_fraction,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        rows,
        records: all_records,
    })
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, gen_background, GenConfig};

    #[test]
    fn edit_mask_trivials() {
        let bg = gen_background(1);
        let (_, f) = edit_mask(&bg, &bg, 8).unwrap();
        assert_eq!(f, 0.0);

        let shifted = bg.map_px(|p| p.iter().map(|&v| v.saturating_add(40)).collect());
        let (_, f) = edit_mask(&bg, &shifted, 8).unwrap();
        assert!(f > 0.99, "everywhere-different: {f}");

        let other = Image::new(32, 32, 3);
        assert!(edit_mask(&bg, &other, 8).is_err());
    }

    #[test]
    fn planted_quarter_edit_measures_quarter() {
        let bg = gen_background(2);
        let mut out = bg.clone();
        for y in 16..48 {
            for x in 16..48 {
                let p = out.px(x, y).to_vec();
                let v: Vec<u8> = p.iter().map(|&v| v ^ 0x80).collect();
                out.set_px(x, y, &v);
            }
        }
        let (_, f) = edit_mask(&bg, &out, 8).unwrap();
        assert!((f - 0.25).abs() < 0.01, "fraction {f}");
    }

    #[test]
    fn no_edit_gates_everything_out() {
        let bg = gen_background(3);
        let emb = EvalEmbedders::default();
        let cfg = EvalConfig::default();
        let rec = score_sample(&bg, &bg, &bg, &emb, &cfg).unwrap();
        assert_eq!(rec.edit_fraction, 0.0);
        assert!(rec.clip_i.is_none(), "failure-to-edit gates identity too");
        assert!(rec.csd.is_none());
        assert!(rec.aes.is_none());
    }

    #[test]
    fn aes_is_deterministic_and_bounded() {
        let bg = gen_background(4);
        let a = aes_score(&bg);
        let b = aes_score(&bg);
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn overall_mean_matches_published_arithmetic() {
        let round3 = |x: f64| (x * 1000.0).round() / 1000.0;
        assert_eq!(round3(overall_mean(0.779, 0.481, 0.655)), 0.638);
        assert_eq!(round3(overall_mean(0.761, 0.466, 0.697)), 0.641);
        assert_eq!(overall_mean(1.0, 1.0, 1.0), 1.0);
    }

    fn bench_records(dir: &std::path::Path, count: usize, seed: u64) -> Vec<crate::data::SampleRecord> {
        let config = GenConfig {
            count,
            seed,
            corruption_rate: 0.0,
            train_frac: 0.0,
            val_frac: 0.0, // everything lands in the bench split
            ..GenConfig::default()
        };
        build_dataset(&config, dir).unwrap()
    }

    #[test]
    fn copy_paste_keeps_identity_but_not_style() {
        let dir = tempfile::tempdir().unwrap();
        let records = bench_records(dir.path(), 12, 55);
        let emb = EvalEmbedders::default();
        let cfg = EvalConfig::default();

        // Oracle: the uniformly stylized ground-truth composite.
        let base = dir.path().to_path_buf();
        let by_id: std::collections::BTreeMap<String, crate::data::SampleRecord> =
            records.iter().map(|r| (r.id.clone(), r.clone())).collect();
        let oracle = move |input: &ComposeInput| -> std::result::Result<Image, String> {
            let r = by_id.get(input.sample_id).ok_or("unknown id")?;
            let s = crate::data::load_sample(&base, r).map_err(|e| e.to_string())?;
            Ok(s.i_s)
        };

        let methods: Vec<(String, CompositorFn)> = vec![
            ("copy-paste".into(), &copy_paste_compositor),
            ("stylize-oracle".into(), &oracle),
        ];
        let report = run_benchmark(dir.path(), &records, &methods, &cfg, &emb).unwrap();
        let cp = report.row("copy-paste").unwrap();
        let or = report.row("stylize-oracle").unwrap();
        assert!(cp.clip_i.unwrap() > 0.95, "paste is the identity ceiling: {:?}", cp.clip_i);
        assert!(
            cp.csd.unwrap() < or.csd.unwrap(),
            "paste must lose style to the oracle: {:?} vs {:?}",
            cp.csd,
            or.csd
        );
        // Every pasted edit clears the gate.
        assert_eq!(cp.n_gated_out, 0, "copy-paste edits must exceed the gate");
    }

    #[test]
    fn single_sample_report_echoes_scores_and_duplicates_agree() {
        let dir = tempfile::tempdir().unwrap();
        let records = bench_records(dir.path(), 1, 77);
        let emb = EvalEmbedders::default();
        let cfg = EvalConfig::default();
        let methods: Vec<(String, CompositorFn)> = vec![
            ("a".into(), &copy_paste_compositor),
            ("b".into(), &copy_paste_compositor),
        ];
        let report = run_benchmark(dir.path(), &records, &methods, &cfg, &emb).unwrap();
        let a = report.row("a").unwrap();
        let b = report.row("b").unwrap();
        assert_eq!(a.clip_i, b.clip_i);
        assert_eq!(a.csd, b.csd);
        assert_eq!(a.aes, b.aes);
        let rec = &report.records[0];
        assert_eq!(a.clip_i, rec.clip_i, "single-sample mean equals the sample");

        // Determinism of the whole report.
        let again = run_benchmark(dir.path(), &records, &methods, &cfg, &emb).unwrap();
        assert_eq!(report.to_jsonl(), again.to_jsonl());
        assert!(report.text_table().contains("pixel_threshold=8"));
    }

    #[test]
    fn method_failure_is_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let records = bench_records(dir.path(), 3, 88);
        let emb = EvalEmbedders::default();
        let cfg = EvalConfig::default();
        let broken = |_: &ComposeInput| -> std::result::Result<Image, String> {
            Err("deliberate".into())
        };
        let methods: Vec<(String, CompositorFn)> = vec![("broken".into(), &broken)];
        let report = run_benchmark(dir.path(), &records, &methods, &cfg, &emb).unwrap();
        let row = report.row("broken").unwrap();
        assert_eq!(row.n_failed, 3);
        assert_eq!(row.n_gated_out, 3);
        assert!(row.clip_i.is_none());
    }
}
