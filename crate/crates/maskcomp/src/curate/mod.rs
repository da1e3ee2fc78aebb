//! Two-stage dataset curation.
//!
//! Filter 1 scores identity consistency between the composite and its
//! stylized variant over the masked subject; Filter 2 scores style
//! coherence between the subject region and a patch-filled background
//! representation. Thresholds come from a precision-maximizing grid search
//! under a rejection-rate cap, never from guesses.

pub mod embed;

pub use embed::{similarity01, Embedder, SemanticEmbedder, StyleEmbedder};

use crate::data::{load_sample, FilterScores, Image, ImageError, SampleRecord};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("mask and image sizes differ")]
    SizeMismatch,
    #[error("retained region has no full {0}x{0} patch to copy from")]
    RetainedTooSmall(usize),
    #[error("calibration needs both classes; got {n_good} good / {n_bad} bad")]
    OneClass { n_good: usize, n_bad: usize },
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
}

pub type Result<T> = std::result::Result<T, CurateError>;

/// Tight bounding-box crop of the mask's support.
pub fn crop_masked(img: &Image, mask: &Image) -> Result<Image> {
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(CurateError::SizeMismatch);
    }
    let (x, y, w, h) = mask.mask_bbox()?;
    Ok(img.crop(x, y, w, h))
}

/// Identity-consistency scores between the stylized and clean composites
/// over the masked subject, under the two semantic embedders.
pub fn identity_scores(
    i_s: &Image,
    i_c: &Image,
    i_m: &Image,
    clip: &SemanticEmbedder,
    dino: &SemanticEmbedder,
) -> Result<(f64, f64)> {
    let a = crop_masked(i_s, i_m)?;
    let b = crop_masked(i_c, i_m)?;
    Ok((clip.similarity(&a, &b), dino.similarity(&a, &b)))
}

/// Overwrites masked-out pixels with patches copied from fully-retained
/// tiles, visiting tiles in raster order. Retained pixels are untouched;
/// an empty mask returns the image unchanged.
pub fn patch_fill(img: &Image, mask: &Image, patch: usize) -> Result<Image> {
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(CurateError::SizeMismatch);
    }
    if mask.mask_area() == 0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width(), img.height());
    let tile_clean = |tx: usize, ty: usize| -> bool {
        for y in ty..(ty + patch).min(h) {
            for x in tx..(tx + patch).min(w) {
                if mask.mask_at(x, y) {
                    return false;
                }
            }
        }
        true
    };
    // Source patches: grid-aligned, fully inside, fully retained.
    let mut sources = Vec::new();
    let mut ty = 0;
    while ty + patch <= h {
        let mut tx = 0;
        while tx + patch <= w {
            if tile_clean(tx, ty) {
                sources.push((tx, ty));
            }
            tx += patch;
        }
        ty += patch;
    }
    if sources.is_empty() {
        return Err(CurateError::RetainedTooSmall(patch));
    }

    let mut out = img.clone();
    let mut next = 0usize;
    let mut ty = 0;
    while ty < h {
        let mut tx = 0;
        while tx < w {
            let needs_fill = (ty..(ty + patch).min(h))
                .any(|y| (tx..(tx + patch).min(w)).any(|x| mask.mask_at(x, y)));
            if needs_fill {
                let (sx, sy) = sources[next % sources.len()];
                next += 1;
                for dy in 0..patch.min(h - ty) {
                    for dx in 0..patch.min(w - tx) {
                        let (x, y) = (tx + dx, ty + dy);
                        if mask.mask_at(x, y) {
                            let v = img.px(sx + dx, sy + dy).to_vec();
                            out.set_px(x, y, &v);
                        }
                    }
                }
            }
            tx += patch;
        }
        ty += patch;
    }
    Ok(out)
}

/// Patch sides the style filter tries, largest first: 64 on large images,
/// then quarters and eighths of the short side. A big centered subject can
/// leave no clean quarter-side tile, so the ladder halves until a source
/// patch exists.
pub fn style_patch_ladder(img: &Image) -> Vec<usize> {
    let side = img.width().min(img.height());
    let mut ladder = Vec::new();
    if side >= 256 {
        ladder.push(64);
    }
    let mut p = (side / 4).max(2);
    while p >= 2 {
        ladder.push(p);
        p /= 2;
    }
    ladder
}

/// Style-coherence score: similarity between the subject crop and the
/// patch-filled background representation.
pub fn style_score(i_s: &Image, i_m: &Image, style: &StyleEmbedder) -> Result<f64> {
    let area = i_m.mask_area();
    if area == 0 {
        return Err(CurateError::DegenerateMask("empty subject region".into()));
    }
    if area == i_m.width() * i_m.height() {
        return Err(CurateError::DegenerateMask("no background region".into()));
    }
    let subject = crop_masked(i_s, i_m)?;
    let ladder = style_patch_ladder(i_s);
    let mut filled = None;
    let mut last_err = CurateError::RetainedTooSmall(ladder[0]);
    for &p in &ladder {
        match patch_fill(i_s, i_m, p) {
            Ok(f) => {
                filled = Some(f);
                break;
            }
            Err(e) => last_err = e,
        }
    }
    let filled = filled.ok_or(last_err)?;
    Ok(style.similarity(&subject, &filled))
}

// ── threshold calibration ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub threshold: f64,
    pub precision: f64,
    pub rejection_rate: f64,
    pub rejection_cap: f64,
    pub n_good: usize,
    pub n_bad: usize,
    /// The candidate cut points searched.
    pub grid: Vec<f64>,
}

/// Candidate cut points for a score list: the sorted unique values, their
/// midpoints, and one value below the minimum so "reject nothing" is
/// always reachable.
pub fn calibration_grid(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut grid = Vec::with_capacity(2 * u.len());
    if let Some(&lo) = u.first() {
        grid.push(lo - 1.0);
    }
    for i in 0..u.len() {
        grid.push(u[i]);
        if i + 1 < u.len() {
            grid.push((u[i] + u[i + 1]) / 2.0);
        }
    }
    grid
}

/// Grid search for the threshold maximizing precision of the accepted set
/// (`score > threshold`) subject to a rejection-rate cap. Ties break
/// toward lower rejection, then lower threshold.
pub fn calibrate(scores: &[(f64, bool)], rejection_cap: f64) -> Result<CalibrationReport> {
    assert!(
        (0.0..=1.0).contains(&rejection_cap),
        "rejection cap must lie in [0, 1]"
    );
    let n_good = scores.iter().filter(|(_, g)| *g).count();
    let n_bad = scores.len() - n_good;
    if n_good == 0 || n_bad == 0 {
        return Err(CurateError::OneClass { n_good, n_bad });
    }
    let grid = calibration_grid(&scores.iter().map(|(s, _)| *s).collect::<Vec<_>>());
    let total = scores.len() as f64;
    let mut best: Option<(f64, f64, f64)> = None; // (threshold, precision, rejection)
    for &theta in &grid {
        let accepted: Vec<bool> = scores
            .iter()
            .filter(|(s, _)| *s > theta)
            .map(|(_, g)| *g)
            .collect();
        if accepted.is_empty() {
            continue; // precision undefined on an empty accepted set
        }
        let rejection = (scores.len() - accepted.len()) as f64 / total;
        if rejection > rejection_cap {
            continue;
        }
        let precision = accepted.iter().filter(|g| **g).count() as f64 / accepted.len() as f64;
        let better = match best {
            None => true,
            Some((bt, bp, br)) => {
                precision > bp
                    || (precision == bp && rejection < br)
                    || (precision == bp && rejection == br && theta < bt)
            }
        };
        if better {
            best = Some((theta, precision, rejection));
        }
    }
    let (threshold, precision, rejection_rate) =
        best.expect("the below-minimum candidate always satisfies any cap");
    Ok(CalibrationReport {
        threshold,
        precision,
        rejection_rate,
        rejection_cap,
        n_good,
        n_bad,
        grid,
    })
}

/// Calibrated thresholds with their evidence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub t_clip: f64,
    pub t_dino: f64,
    pub t_csd: f64,
    pub validation_id: String,
    pub clip_report: CalibrationReport,
    pub dino_report: CalibrationReport,
    pub csd_report: CalibrationReport,
}

impl FilterThresholds {
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<FilterThresholds> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The three embedders the cascade runs on.
pub struct CurationEmbedders {
    pub clip: SemanticEmbedder,
    pub dino: SemanticEmbedder,
    pub style: StyleEmbedder,
}

impl Default for CurationEmbedders {
    fn default() -> Self {
        CurationEmbedders {
            clip: SemanticEmbedder::clip_like(),
            dino: SemanticEmbedder::dino_like(),
            style: StyleEmbedder,
        }
    }
}

/// All three raw scores for one sample (csd always computed here; the
/// cascade decides what it needs).
pub fn score_images(
    i_s: &Image,
    i_c: &Image,
    i_m: &Image,
    emb: &CurationEmbedders,
) -> Result<(f64, f64, f64)> {
    let (s_clip, s_dino) = identity_scores(i_s, i_c, i_m, &emb.clip, &emb.dino)?;
    let s_csd = style_score(i_s, i_m, &emb.style)?;
    Ok((s_clip, s_dino, s_csd))
}

/// Membership rule shared by the cascade and its tests: accepted iff all
/// three scores are strictly above their thresholds.
pub fn accepts(scores: (f64, f64, f64), t: &FilterThresholds) -> bool {
    scores.0 > t.t_clip && scores.1 > t.t_dino && scores.2 > t.t_csd
}

/// Calibrates each threshold independently on the same labeled set, using
/// the ground-truth good/bad labels.
pub fn calibrate_thresholds(
    base_dir: impl AsRef<Path>,
    records: &[SampleRecord],
    rejection_cap: f64,
    emb: &CurationEmbedders,
) -> Result<FilterThresholds> {
    let mut clip_scores = Vec::new();
    let mut dino_scores = Vec::new();
    let mut csd_scores = Vec::new();
    for r in records {
        let Some(label) = r.label.as_deref() else {
            continue;
        };
        let good = label == "good";
        let s = load_sample(&base_dir, r)?;
        let (s_clip, s_dino, s_csd) = score_images(&s.i_s, &s.i_c, &s.i_m, emb)?;
        clip_scores.push((s_clip, good));
        dino_scores.push((s_dino, good));
        csd_scores.push((s_csd, good));
    }
    let clip_report = calibrate(&clip_scores, rejection_cap)?;
    let dino_report = calibrate(&dino_scores, rejection_cap)?;
    let csd_report = calibrate(&csd_scores, rejection_cap)?;
    Ok(FilterThresholds {
        t_clip: clip_report.threshold,
        t_dino: dino_report.threshold,
        t_csd: csd_report.threshold,
        validation_id: format!("{} labeled records", clip_scores.len()),
        clip_report,
        dino_report,
        csd_report,
    })
}

/// Two-stage cascade over a manifest: Filter 1 (identity) then Filter 2
/// (style). Every record comes back annotated with its scores and verdict;
/// the two outputs partition the input.
pub fn filter_dataset(
    base_dir: impl AsRef<Path>,
    records: &[SampleRecord],
    thresholds: &FilterThresholds,
    emb: &CurationEmbedders,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for r in records {
        let s = load_sample(&base_dir, r)?;
        let (s_clip, s_dino) = identity_scores(&s.i_s, &s.i_c, &s.i_m, &emb.clip, &emb.dino)?;
        let pass1 = s_clip > thresholds.t_clip && s_dino > thresholds.t_dino;
        let mut annotated = r.clone();
        if !pass1 {
            annotated.scores = Some(FilterScores {
                s_clip,
                s_dino,
                s_csd: None,
                verdict: Some("rejected:identity".into()),
            });
            rejected.push(annotated);
            continue;
        }
        let s_csd = style_score(&s.i_s, &s.i_m, &emb.style)?;
        let pass2 = s_csd > thresholds.t_csd;
        annotated.scores = Some(FilterScores {
            s_clip,
            s_dino,
            s_csd: Some(s_csd),
            verdict: Some(if pass2 {
                "accepted".into()
            } else {
                "rejected:style".into()
            }),
        });
        if pass2 {
            accepted.push(annotated);
        } else {
            rejected.push(annotated);
        }
    }
    Ok((accepted, rejected))
}
