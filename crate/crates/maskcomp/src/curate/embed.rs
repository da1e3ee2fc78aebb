//! Deterministic stand-in embedders.
//!
//! Pretrained similarity backbones are out of reach here, so scoring runs
//! on closed-form image statistics behind the same interface: a "semantic"
//! family built from pooled color and edge-orientation histograms, and a
//! "style" embedder built from global color and texture statistics. Only
//! score ordering matters downstream; thresholds are always calibrated,
//! never assumed.

use crate::data::Image;

/// An image-to-vector function with a similarity in [0, 1].
pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, img: &Image) -> Vec<f64>;

    /// Cosine similarity mapped to [0, 1] via (1 + cos)/2.
    fn similarity(&self, a: &Image, b: &Image) -> f64 {
        similarity01(&self.embed(a), &self.embed(b))
    }
}

pub fn similarity01(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.5; // degenerate all-zero vector: neutral
    }
    (1.0 + (dot / (na * nb)).clamp(-1.0, 1.0)) / 2.0
}

const CANON: usize = 32;

fn luma(p: &[u8]) -> f64 {
    if p.len() == 1 {
        p[0] as f64
    } else {
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    }
}

/// Edge-orientation histogram over a spatial grid: central-difference
/// gradients, orientation folded mod pi into 8 bins, magnitude-weighted,
/// pooled over 2x2 cells. L2-normalized.
fn edge_histogram(img: &Image) -> Vec<f64> {
    let img = img.resize_nearest(CANON, CANON);
    let cells = 2;
    let bins = 8;
    let mut hist = vec![0.0f64; cells * cells * bins];
    for y in 1..CANON - 1 {
        for x in 1..CANON - 1 {
            let gx = luma(img.px(x + 1, y)) - luma(img.px(x - 1, y));
            let gy = luma(img.px(x, y + 1)) - luma(img.px(x, y - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag < 1.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            let bin = ((theta / std::f64::consts::PI) * bins as f64) as usize % bins;
            let (cx, cy) = (x * cells / CANON, y * cells / CANON);
            hist[(cy * cells + cx) * bins + bin] += mag;
        }
    }
    l2_normalize(hist)
}

/// Coarse RGB histogram, 3 buckets per channel. L1 then L2 normalized.
fn color_histogram(img: &Image) -> Vec<f64> {
    let img = img.resize_nearest(CANON, CANON);
    let mut hist = vec![0.0f64; 27];
    for y in 0..CANON {
        for x in 0..CANON {
            let p = img.px(x, y);
            let (r, g, b) = if p.len() == 1 {
                (p[0], p[0], p[0])
            } else {
                (p[0], p[1], p[2])
            };
            let idx = (r as usize * 3 / 256) * 9 + (g as usize * 3 / 256) * 3 + (b as usize * 3 / 256);
            hist[idx] += 1.0;
        }
    }
    l2_normalize(hist)
}

fn l2_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    v
}

/// Pooled color + edge-orientation histograms with a tunable balance.
/// `edge_weight` close to 1 makes it structure-dominated.
pub struct SemanticEmbedder {
    name: String,
    edge_weight: f64,
}

impl SemanticEmbedder {
    /// Appearance-leaning variant (color and structure evenly mixed).
    pub fn clip_like() -> SemanticEmbedder {
        SemanticEmbedder {
            name: "semantic-clip".into(),
            edge_weight: 0.6,
        }
    }

    /// Structure-leaning variant; robust to uniform palette shifts.
    pub fn dino_like() -> SemanticEmbedder {
        SemanticEmbedder {
            name: "semantic-dino".into(),
            edge_weight: 0.92,
        }
    }
}

impl Embedder for SemanticEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        2 * 2 * 8 + 27
    }

    fn embed(&self, img: &Image) -> Vec<f64> {
        let we = self.edge_weight;
        let wc = 1.0 - we;
        let mut v: Vec<f64> = edge_histogram(img).into_iter().map(|x| x * we).collect();
        v.extend(color_histogram(img).into_iter().map(|x| x * wc));
        v
    }
}

/// Global color/texture statistics built to track *how* a region is
/// rendered rather than what it depicts: mean chromaticity (palette pull),
/// chroma spread, luminance profile, per-channel distinct-value density
/// (quantization signature), gradient energy, and a constant anchor so no
/// image embeds to the zero vector.
pub struct StyleEmbedder;

impl Embedder for StyleEmbedder {
    fn name(&self) -> &str {
        "style-stats"
    }

    fn dim(&self) -> usize {
        12
    }

    fn embed(&self, img: &Image) -> Vec<f64> {
        let n = (img.width() * img.height()) as f64;
        let mut chroma_sum = [0.0f64; 2];
        let mut chroma_sq = [0.0f64; 2];
        let mut luma_sum = 0.0;
        let mut luma_sq = 0.0;
        let mut uniques = [std::collections::BTreeSet::new(), Default::default(), Default::default()];
        for y in 0..img.height() {
            for x in 0..img.width() {
                let p = img.px(x, y);
                let (r, g, b) = if p.len() == 1 {
                    (p[0], p[0], p[0])
                } else {
                    (p[0], p[1], p[2])
                };
                let s = r as f64 + g as f64 + b as f64 + 3.0;
                let cr = r as f64 / s;
                let cg = g as f64 / s;
                chroma_sum[0] += cr;
                chroma_sum[1] += cg;
                chroma_sq[0] += cr * cr;
                chroma_sq[1] += cg * cg;
                let l = luma(p) / 255.0;
                luma_sum += l;
                luma_sq += l * l;
                uniques[0].insert(r);
                uniques[1].insert(g);
                uniques[2].insert(b);
            }
        }
        let cmean = [chroma_sum[0] / n, chroma_sum[1] / n];
        let cstd = [
            (chroma_sq[0] / n - cmean[0] * cmean[0]).max(0.0).sqrt(),
            (chroma_sq[1] / n - cmean[1] * cmean[1]).max(0.0).sqrt(),
        ];
        let lmean = luma_sum / n;
        let lstd = (luma_sq / n - lmean * lmean).max(0.0).sqrt();
        let density = |u: &std::collections::BTreeSet<u8>| (u.len().min(64) as f64) / 64.0;

        // Texture energy from luminance gradients.
        let mut grad_sum = 0.0;
        let mut grad_high = 0.0;
        let (w, h) = (img.width(), img.height());
        if w > 2 && h > 2 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let gx = luma(img.px(x + 1, y)) - luma(img.px(x - 1, y));
                    let gy = luma(img.px(x, y + 1)) - luma(img.px(x, y - 1));
                    let mag = (gx * gx + gy * gy).sqrt() / 255.0;
                    grad_sum += mag;
                    if mag > 0.25 {
                        grad_high += 1.0;
                    }
                }
            }
            let interior = ((w - 2) * (h - 2)) as f64;
            grad_sum /= interior;
            grad_high /= interior;
        }

        vec![
            cmean[0] * 3.0, // palette pull dominates the similarity
            cmean[1] * 3.0,
            cstd[0] * 1.5,
            cstd[1] * 1.5,
            lmean * 0.75,
            lstd * 0.75,
            density(&uniques[0]),
            density(&uniques[1]),
            density(&uniques[2]),
            grad_sum * 4.0,
            grad_high,
            0.3, // constant anchor
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_background, gen_foreground, stylize, style_by_id};

    #[test]
    fn embeddings_are_deterministic_and_finite() {
        let (img, _, _) = gen_foreground(4);
        for e in [
            &SemanticEmbedder::clip_like() as &dyn Embedder,
            &SemanticEmbedder::dino_like(),
            &StyleEmbedder,
        ] {
            let a = e.embed(&img);
            let b = e.embed(&img);
            assert_eq!(a, b, "{} must be deterministic", e.name());
            assert_eq!(a.len(), e.dim());
            assert!(a.iter().all(|v| v.is_finite()));
            assert!(a.iter().any(|v| *v != 0.0), "non-zero for a non-constant image");
        }
    }

    #[test]
    fn identical_images_have_similarity_one() {
        let bg = gen_background(8);
        for e in [
            &SemanticEmbedder::clip_like() as &dyn Embedder,
            &SemanticEmbedder::dino_like(),
            &StyleEmbedder,
        ] {
            let s = e.similarity(&bg, &bg);
            assert!((s - 1.0).abs() < 1e-12, "{}: {s}", e.name());
        }
    }

    #[test]
    fn structure_variant_shrugs_off_uniform_palette_shift() {
        let (img, _, _) = gen_foreground(15);
        let styled = stylize(&img, &style_by_id("invert").unwrap());
        let dino = SemanticEmbedder::dino_like();
        let clip = SemanticEmbedder::clip_like();
        let s_dino = dino.similarity(&img, &styled);
        let s_clip = clip.similarity(&img, &styled);
        assert!(s_dino > 0.9, "structure survives inversion: {s_dino}");
        assert!(
            s_dino > s_clip,
            "color-leaning variant must react more: {s_dino} vs {s_clip}"
        );
    }

    #[test]
    fn style_stats_separate_styles() {
        let bg = gen_background(30);
        let a = stylize(&bg, &style_by_id("invert").unwrap());
        let b = stylize(&bg, &style_by_id("sepia").unwrap());
        let e = StyleEmbedder;
        let same = e.similarity(&a, &a);
        let cross = e.similarity(&a, &b);
        assert!(same > cross, "same style must beat different style");
    }
}
