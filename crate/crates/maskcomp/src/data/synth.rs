//! Procedural composition data.
//!
//! Generates triplets {foreground, composite, mask} and stylized
//! quadruplets at 64x64, with known-good style coherence for positive
//! samples and two planted corruption modes for negatives. Everything is a
//! pure function of (seed, index), so parallel or repeated generation
//! yields identical bytes.

use super::image::{Image, ImageError, Result};
use crate::rng::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const SCENE_SIZE: usize = 64;
pub const REF_SIZE: usize = 32;

// ── styles ──────────────────────────────────────────────────────────

/// Per-pixel RGB lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PaletteMap {
    Identity,
    /// Reorder channels; a swap is involutive.
    Permute([usize; 3]),
    Invert,
    /// Blend each pixel toward a target color, keeping `keep`/255 of the
    /// original.
    Tint { target: [u8; 3], keep: u8 },
}

impl PaletteMap {
    pub fn apply(&self, p: [u8; 3]) -> [u8; 3] {
        match self {
            PaletteMap::Identity => p,
            PaletteMap::Permute(idx) => [p[idx[0]], p[idx[1]], p[idx[2]]],
            PaletteMap::Invert => [255 - p[0], 255 - p[1], 255 - p[2]],
            PaletteMap::Tint { target, keep } => {
                let k = *keep as u32;
                let mut out = [0u8; 3];
                for i in 0..3 {
                    out[i] = ((p[i] as u32 * k + target[i] as u32 * (255 - k)) / 255) as u8;
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TextureOp {
    None,
    /// Darken every other vertical band of `period` pixels.
    Stripes { period: usize, keep: u8 },
    Checker { period: usize, keep: u8 },
    /// Quantize each channel to `levels` values.
    Posterize { levels: u8 },
}

impl TextureOp {
    fn apply(&self, x: usize, y: usize, p: [u8; 3]) -> [u8; 3] {
        let darken = |p: [u8; 3], keep: u8| {
            [
                (p[0] as u32 * keep as u32 / 255) as u8,
                (p[1] as u32 * keep as u32 / 255) as u8,
                (p[2] as u32 * keep as u32 / 255) as u8,
            ]
        };
        match self {
            TextureOp::None => p,
            TextureOp::Stripes { period, keep } => {
                if (x / period) % 2 == 1 {
                    darken(p, *keep)
                } else {
                    p
                }
            }
            TextureOp::Checker { period, keep } => {
                if (x / period + y / period) % 2 == 1 {
                    darken(p, *keep)
                } else {
                    p
                }
            }
            TextureOp::Posterize { levels } => {
                let l = (*levels).max(2) as u32;
                let mut out = [0u8; 3];
                for i in 0..3 {
                    let bucket = p[i] as u32 * l / 256;
                    out[i] = (bucket * 255 / (l - 1)) as u8;
                }
                out
            }
        }
    }
}

/// A deterministic global image transform: palette map then texture op,
/// applied uniformly so subject and background stay style-coherent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub id: String,
    pub palette: PaletteMap,
    pub texture: TextureOp,
}

impl StyleSpec {
    pub fn identity() -> StyleSpec {
        StyleSpec {
            id: "identity".into(),
            palette: PaletteMap::Identity,
            texture: TextureOp::None,
        }
    }
}

/// The built-in style archetypes used by dataset generation. All of them
/// pull the palette toward a distinctive chroma so coherence is a
/// measurable property of any region.
pub fn style_library() -> Vec<StyleSpec> {
    vec![
        StyleSpec {
            id: "sepia".into(),
            palette: PaletteMap::Tint {
                target: [160, 116, 56],
                keep: 90,
            },
            texture: TextureOp::None,
        },
        StyleSpec {
            id: "rose".into(),
            palette: PaletteMap::Tint {
                target: [225, 120, 160],
                keep: 100,
            },
            texture: TextureOp::None,
        },
        StyleSpec {
            id: "cyan-wash".into(),
            palette: PaletteMap::Tint {
                target: [70, 180, 210],
                keep: 80,
            },
            texture: TextureOp::None,
        },
        StyleSpec {
            id: "teal-stripes".into(),
            palette: PaletteMap::Tint {
                target: [40, 160, 170],
                keep: 110,
            },
            texture: TextureOp::Stripes { period: 4, keep: 190 },
        },
        StyleSpec {
            id: "mint-checker".into(),
            palette: PaletteMap::Tint {
                target: [120, 220, 150],
                keep: 110,
            },
            texture: TextureOp::Checker { period: 8, keep: 200 },
        },
        StyleSpec {
            id: "ink".into(),
            palette: PaletteMap::Tint {
                target: [40, 48, 110],
                keep: 70,
            },
            texture: TextureOp::Posterize { levels: 3 },
        },
    ]
}

/// Extra specs reachable by id but not part of the default library; these
/// exercise palette-map edge cases (involutions, bare quantization).
fn extra_styles() -> Vec<StyleSpec> {
    vec![
        StyleSpec {
            id: "swap-rb".into(),
            palette: PaletteMap::Permute([2, 1, 0]),
            texture: TextureOp::None,
        },
        StyleSpec {
            id: "invert".into(),
            palette: PaletteMap::Invert,
            texture: TextureOp::None,
        },
        StyleSpec {
            id: "poster4".into(),
            palette: PaletteMap::Identity,
            texture: TextureOp::Posterize { levels: 4 },
        },
    ]
}

pub fn style_by_id(id: &str) -> Option<StyleSpec> {
    if id == "identity" {
        return Some(StyleSpec::identity());
    }
    style_library()
        .into_iter()
        .chain(extra_styles())
        .find(|s| s.id == id)
}

/// Uniform global stylization.
pub fn stylize(img: &Image, spec: &StyleSpec) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.px(x, y);
            let p = spec.palette.apply([p[0], p[1], p[2]]);
            let p = spec.texture.apply(x, y, p);
            out.set_px(x, y, &p);
        }
    }
    out
}

// ── foreground objects ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Diamond,
    Ring,
    Cross,
}

const SHAPES: [ShapeKind; 5] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Diamond,
    ShapeKind::Ring,
    ShapeKind::Cross,
];

/// Ground-truth geometry of a generated foreground.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeDescriptor {
    pub kind: ShapeKind,
    pub body: [u8; 3],
    pub accent: [u8; 3],
    /// Exact number of object pixels in the reference frame.
    pub area_px: usize,
}

fn saturated_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // One dominant channel, one mid, one low: clearly "object-like".
    let hi = rng.random_range(190..=255u16) as u8;
    let mid = rng.random_range(60..=160u16) as u8;
    let lo = rng.random_range(0..=50u16) as u8;
    let mut c = [hi, mid, lo];
    let rot = rng.random_range(0..3usize);
    c.rotate_left(rot);
    if rng.random_bool(0.5) {
        c.swap(1, 2);
    }
    c
}

fn inside(kind: ShapeKind, x: f64, y: f64, r: f64) -> bool {
    // Membership in a shape centered at the origin with nominal radius r.
    match kind {
        ShapeKind::Circle => x * x + y * y <= r * r,
        ShapeKind::Square => x.abs() <= r * 0.9 && y.abs() <= r * 0.9,
        ShapeKind::Diamond => x.abs() + y.abs() <= r * 1.2,
        ShapeKind::Ring => {
            let d2 = x * x + y * y;
            d2 <= r * r && d2 >= (r * 0.35) * (r * 0.35)
        }
        ShapeKind::Cross => (x.abs() <= r * 0.45 && y.abs() <= r) || (y.abs() <= r * 0.45 && x.abs() <= r),
    }
}

const REF_BG: [u8; 3] = [224, 224, 224];

/// Draws a parametric object on a neutral background; returns the image,
/// its exact support mask and the descriptor.
pub fn gen_foreground(seed: u64) -> (Image, Image, ShapeDescriptor) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xf9]));
    let kind = SHAPES[rng.random_range(0..SHAPES.len())];
    let body = saturated_color(&mut rng);
    let accent = saturated_color(&mut rng);
    let r = rng.random_range(12.0..14.5f64);

    let mut img = Image::rgb_filled(REF_SIZE, REF_SIZE, REF_BG);
    let mut mask = Image::new(REF_SIZE, REF_SIZE, 1);
    let ctr = REF_SIZE as f64 / 2.0 - 0.5;
    let mut area = 0usize;
    for y in 0..REF_SIZE {
        for x in 0..REF_SIZE {
            let dx = x as f64 - ctr;
            let dy = y as f64 - ctr;
            if inside(kind, dx, dy, r) {
                let color = if inside(kind, dx * 2.2, dy * 2.2, r) {
                    accent
                } else {
                    body
                };
                img.set_px(x, y, &color);
                mask.set_px(x, y, &[255]);
                area += 1;
            }
        }
    }
    (
        img,
        mask,
        ShapeDescriptor {
            kind,
            body,
            accent,
            area_px: area,
        },
    )
}

/// Smooth two-color gradient scene.
pub fn gen_background(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xb9]));
    let a = [
        rng.random_range(40..200u16) as u8,
        rng.random_range(40..200u16) as u8,
        rng.random_range(40..200u16) as u8,
    ];
    let b = [
        rng.random_range(40..200u16) as u8,
        rng.random_range(40..200u16) as u8,
        rng.random_range(40..200u16) as u8,
    ];
    let horizontal = rng.random_bool(0.5);
    let mut img = Image::new(SCENE_SIZE, SCENE_SIZE, 3);
    for y in 0..SCENE_SIZE {
        for x in 0..SCENE_SIZE {
            let t = if horizontal { x } else { y } as u32;
            let n = (SCENE_SIZE - 1) as u32;
            let mut p = [0u8; 3];
            for i in 0..3 {
                p[i] = ((a[i] as u32 * (n - t) + b[i] as u32 * t) / n) as u8;
            }
            img.set_px(x, y, &p);
        }
    }
    img
}

/// Where and how large the object lands in the scene.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Placement {
    pub cx: usize,
    pub cy: usize,
    /// Side of the square box the foreground is scaled into.
    pub size: usize,
}

impl Placement {
    fn origin(&self) -> (i64, i64) {
        (
            self.cx as i64 - self.size as i64 / 2,
            self.cy as i64 - self.size as i64 / 2,
        )
    }
}

/// Pastes the foreground into the background at `placement`. The mask is
/// the exact placed object support.
pub fn compose(
    fg: &Image,
    fg_mask: &Image,
    background: &Image,
    placement: Placement,
) -> Result<(Image, Image)> {
    let (ox, oy) = placement.origin();
    if ox < 0
        || oy < 0
        || ox + placement.size as i64 > background.width() as i64
        || oy + placement.size as i64 > background.height() as i64
    {
        return Err(ImageError::Geometry(format!(
            "placement {placement:?} leaves the {}x{} frame",
            background.width(),
            background.height()
        )));
    }
    let fg_scaled = fg.resize_nearest(placement.size, placement.size);
    let mask_scaled = fg_mask.resize_nearest(placement.size, placement.size);
    let mut composite = background.clone();
    let mut mask = Image::new(background.width(), background.height(), 1);
    for y in 0..placement.size {
        for x in 0..placement.size {
            if mask_scaled.mask_at(x, y) {
                let (tx, ty) = ((ox as usize) + x, (oy as usize) + y);
                let v = fg_scaled.px(x, y).to_vec();
                composite.set_px(tx, ty, &v);
                mask.set_px(tx, ty, &[255]);
            }
        }
    }
    Ok((composite, mask))
}

// ── corruption modes for negatives ──────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// A different object replaces the masked region (identity filter prey).
    IdentityDrift,
    /// Only the background is stylized; the subject stays raw (style
    /// filter prey).
    StyleIncoherence,
}

/// Builds a negative sample from a clean composite.
///
/// `identity_drift` differs from the honest stylized composite only inside
/// the mask; `style_incoherence` keeps the subject bitwise equal to the
/// unstylized composite.
pub fn gen_corrupted(
    i_c: &Image,
    i_m: &Image,
    spec: &StyleSpec,
    mode: CorruptionMode,
    seed: u64,
) -> Result<Image> {
    match mode {
        CorruptionMode::IdentityDrift => {
            let (bx, by, bw, bh) = i_m.mask_bbox()?;
            // A different object: re-draw until the shape kind changes.
            let (_, _, orig_desc) = gen_foreground(seed);
            let mut alt_seed = derive_seed(seed, &[0xd1]);
            let (alt, alt_mask, _) = loop {
                let candidate = gen_foreground(alt_seed);
                if candidate.2.kind != orig_desc.kind {
                    break candidate;
                }
                alt_seed = derive_seed(alt_seed, &[0xd2]);
            };
            let size = bw.max(bh);
            let alt_scaled = alt.resize_nearest(size, size);
            let alt_mask_scaled = alt_mask.resize_nearest(size, size);
            let mut tampered = i_c.clone();
            for y in 0..bh {
                for x in 0..bw {
                    let (tx, ty) = (bx + x, by + y);
                    if i_m.mask_at(tx, ty) {
                        if alt_mask_scaled.mask_at(x, y) {
                            let v = alt_scaled.px(x, y).to_vec();
                            tampered.set_px(tx, ty, &v);
                        } else {
                            tampered.set_px(tx, ty, &REF_BG);
                        }
                    }
                }
            }
            Ok(stylize(&tampered, spec))
        }
        CorruptionMode::StyleIncoherence => {
            let styled = stylize(i_c, spec);
            let mut out = styled;
            for y in 0..i_c.height() {
                for x in 0..i_c.width() {
                    if i_m.mask_at(x, y) {
                        let v = i_c.px(x, y).to_vec();
                        out.set_px(x, y, &v);
                    }
                }
            }
            Ok(out)
        }
    }
}

// ── records and manifests ───────────────────────────────────────────

/// Scores and verdict attached by the curation cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    pub s_clip: f64,
    pub s_dino: f64,
    pub s_csd: Option<f64>,
    pub verdict: Option<String>,
}

/// One dataset element with file paths relative to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub i_f: String,
    pub i_b: String,
    pub i_c: String,
    pub i_m: String,
    pub i_s: String,
    pub i_bs: String,
    pub style_id: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<FilterScores>,
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

/// Generation knobs. `corruption_rate` is the fraction of samples turned
/// into labeled negatives (split evenly between the two modes).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub corruption_rate: f64,
    /// Style ids drawn per sample; defaults to the whole library.
    pub styles: Vec<String>,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 100,
            seed: 0,
            corruption_rate: 0.0,
            styles: style_library().into_iter().map(|s| s.id).collect(),
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

fn split_of(id: &str, train_frac: f64, val_frac: f64) -> &'static str {
    // Deterministic by id hash, independent of generation order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < train_frac {
        "train"
    } else if u < train_frac + val_frac {
        "val"
    } else {
        "bench"
    }
}

/// One fully generated sample, before any file is written.
pub struct GeneratedSample {
    pub record: SampleRecord,
    pub i_f: Image,
    pub i_b: Image,
    pub i_c: Image,
    pub i_m: Image,
    pub i_s: Image,
    pub i_bs: Image,
}

/// Pure per-index generation; the manifest row's images depend only on
/// (config.seed, index).
pub fn generate_sample(config: &GenConfig, index: usize) -> Result<GeneratedSample> {
    let seed = derive_seed(config.seed, &[1, index as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));

    let (i_f, fg_mask, _desc) = gen_foreground(seed);
    let i_b = gen_background(seed);
    let size = rng.random_range(46..=52usize);
    let placement = Placement {
        cx: rng.random_range(29..=35usize),
        cy: rng.random_range(29..=35usize),
        size,
    };
    let (i_c, i_m) = compose(&i_f, &fg_mask, &i_b, placement)?;

    let style_id = &config.styles[rng.random_range(0..config.styles.len())];
    let style = style_by_id(style_id)
        .ok_or_else(|| ImageError::Geometry(format!("unknown style `{style_id}`")))?;

    let corrupt = rng.random_bool(config.corruption_rate);
    let (i_s, label, corruption) = if corrupt {
        let mode = if rng.random_bool(0.5) {
            CorruptionMode::IdentityDrift
        } else {
            CorruptionMode::StyleIncoherence
        };
        let bad = gen_corrupted(&i_c, &i_m, &style, mode, seed)?;
        (bad, Some("bad".to_string()), Some(mode))
    } else {
        (stylize(&i_c, &style), Some("good".to_string()), None)
    };
    let i_bs = stylize(&i_b, &style);

    let id = format!("s{:08x}-{index:05}", config.seed);
    let split = split_of(&id, config.train_frac, config.val_frac).to_string();
    let record = SampleRecord {
        id: id.clone(),
        i_f: format!("img/{id}.if.png"),
        i_b: format!("img/{id}.ib.png"),
        i_c: format!("img/{id}.ic.png"),
        i_m: format!("img/{id}.im.png"),
        i_s: format!("img/{id}.is.png"),
        i_bs: format!("img/{id}.ibs.png"),
        style_id: style_id.clone(),
        split,
        label,
        corruption,
        scores: None,
    };
    Ok(GeneratedSample {
        record,
        i_f,
        i_b,
        i_c,
        i_m,
        i_s,
        i_bs,
    })
}

/// Generates `config.count` samples under `out_dir` and writes
/// `manifest.jsonl`. Returns the records.
pub fn build_dataset(config: &GenConfig, out_dir: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    let mut records = Vec::with_capacity(config.count);
    for index in 0..config.count {
        let s = generate_sample(config, index)?;
        s.i_f.save_png(out.join(&s.record.i_f))?;
        s.i_b.save_png(out.join(&s.record.i_b))?;
        s.i_c.save_png(out.join(&s.record.i_c))?;
        s.i_m.save_png(out.join(&s.record.i_m))?;
        s.i_s.save_png(out.join(&s.record.i_s))?;
        s.i_bs.save_png(out.join(&s.record.i_bs))?;
        records.push(s.record);
    }
    write_manifest(out.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Loads the images referenced by a record.
pub struct LoadedSample {
    pub record: SampleRecord,
    pub i_f: Image,
    pub i_b: Image,
    pub i_c: Image,
    pub i_m: Image,
    pub i_s: Image,
    pub i_bs: Image,
}

pub fn load_sample(base: impl AsRef<Path>, record: &SampleRecord) -> Result<LoadedSample> {
    let base = base.as_ref();
    Ok(LoadedSample {
        record: record.clone(),
        i_f: Image::load_png(base.join(&record.i_f))?,
        i_b: Image::load_png(base.join(&record.i_b))?,
        i_c: Image::load_png(base.join(&record.i_c))?,
        i_m: Image::load_png(base.join(&record.i_m))?,
        i_s: Image::load_png(base.join(&record.i_s))?,
        i_bs: Image::load_png(base.join(&record.i_bs))?,
    })
}
