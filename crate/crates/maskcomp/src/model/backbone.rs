//! Token geometry and the end-to-end forward pass.

use super::attention::RopeTables;
use super::block::forward_block;
use super::{AdapterSet, Bound, ModelConfig, ModelError, Result, StructuralMask, TokenStreams};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Tensor, TensorError};

/// Grid offset applied to reference-stream positions so they never collide
/// with image or style grid positions.
pub const REF_POS_OFFSET: i32 = 32;

/// Row used for text positions, well outside any patch grid.
pub const TEXT_POS_ROW: i32 = -8;

/// Splits `[H, W, C]` into a row of flattened `p x p x C` patches, one
/// token per grid cell in row-major grid order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> crate::tensor::Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(TensorError::DimMismatch {
            op: "patchify",
            detail: format!("expected [H, W, C], got {s:?}"),
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if h % p != 0 || w % p != 0 {
        return Err(TensorError::DimMismatch {
            op: "patchify",
            detail: format!("{h}x{w} not divisible by patch {p}"),
        });
    }
    let (gh, gw) = (h / p, w / p);
    let d = p * p * c;
    let src = image.data();
    let mut out = vec![T::ZERO; gh * gw * d];
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[tok * d + (dy * p + dx) * c + ch] =
                            src[((gy * p + dy) * w + gx * p + dx) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, d], out)
}

/// Inverse of [`patchify`]; exact, bitwise.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    hw: usize,
    p: usize,
    c: usize,
) -> crate::tensor::Result<Tensor<T>> {
    let g = hw / p;
    let d = p * p * c;
    if hw % p != 0 || tokens.shape() != [g * g, d] {
        return Err(TensorError::DimMismatch {
            op: "unpatchify",
            detail: format!("tokens {:?} for image {hw}x{hw}x{c} patch {p}", tokens.shape()),
        });
    }
    let src = tokens.data();
    let mut out = vec![T::ZERO; hw * hw * c];
    for gy in 0..g {
        for gx in 0..g {
            let tok = gy * g + gx;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[((gy * p + dy) * hw + gx * p + dx) * c + ch] =
                            src[tok * d + (dy * p + dx) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![hw, hw, c], out)
}

/// Row-major grid positions with an (x, y) offset.
pub fn grid_positions(grid: usize, offset: (i32, i32)) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            out.push((gx as i32 + offset.0, gy as i32 + offset.1));
        }
    }
    out
}

pub fn text_positions(len: usize) -> Vec<(i32, i32)> {
    (0..len).map(|i| (i as i32, TEXT_POS_ROW)).collect()
}

/// Rotary angle tables for a position list: the first half of each head's
/// rotation pairs encodes the x coordinate, the rest the y coordinate,
/// each over a geometric frequency ladder.
pub fn rope_tables<T: Scalar>(positions: &[(i32, i32)], head_dim: usize) -> RopeTables<T> {
    let half = head_dim / 2;
    let hx = half.div_ceil(2);
    let hy = half - hx;
    let base: f64 = 64.0;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &(px, py) in positions {
        for p in 0..half {
            let (coord, j, g) = if p < hx {
                (px as f64, p, hx)
            } else {
                (py as f64, p - hx, hy.max(1))
            };
            let omega = base.powf(-(j as f64) / g as f64);
            let angle = coord * omega;
            cos.push(T::from_f64(angle.cos()));
            sin.push(T::from_f64(angle.sin()));
        }
    }
    RopeTables { cos, sin }
}

/// Sinusoidal embedding of a scalar timestep, width `d`.
pub fn sinusoidal_t_embed<T: Scalar>(t: f64, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(d);
    let pairs = d / 2;
    for k in 0..pairs {
        let angle = t * std::f64::consts::PI * (k + 1) as f64;
        data.push(T::from_f64(angle.sin()));
        data.push(T::from_f64(angle.cos()));
    }
    while data.len() < d {
        data.push(T::ONE);
    }
    Tensor::new(vec![1, d], data).expect("sized above")
}

/// Host-side inputs for one forward pass. Token tensors are raw patch
/// values `[len x patch_dim]`; positions give each token's grid cell.
pub struct StreamInputs<'a, T: Scalar> {
    pub text_ids: &'a [usize],
    pub image_tokens: &'a Tensor<T>,
    pub image_pos: &'a [(i32, i32)],
    pub style_tokens: &'a Tensor<T>,
    pub style_pos: &'a [(i32, i32)],
    pub ref_tokens: &'a Tensor<T>,
    pub ref_pos: &'a [(i32, i32)],
}

impl<'a, T: Scalar> StreamInputs<'a, T> {
    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let dp = config.patch_dim();
        for (name, tok, pos) in [
            ("image", self.image_tokens, self.image_pos),
            ("style", self.style_tokens, self.style_pos),
            ("ref", self.ref_tokens, self.ref_pos),
        ] {
            if tok.cols() != dp && tok.rows() > 0 {
                return Err(ModelError::BadConfig(format!(
                    "{name} tokens are {} wide, patch dim is {dp}",
                    tok.cols()
                )));
            }
            if tok.rows() != pos.len() {
                return Err(ModelError::BadConfig(format!(
                    "{name}: {} tokens but {} positions",
                    tok.rows(),
                    pos.len()
                )));
            }
        }
        for &id in self.text_ids {
            if id >= config.text_vocab {
                return Err(ModelError::BadConfig(format!(
                    "text id {id} outside vocab {}",
                    config.text_vocab
                )));
            }
        }
        Ok(())
    }
}

/// Velocity floor: the content-to-velocity conversion divides by
/// `max(1 - t, VELOCITY_EPS)` so late-time targets stay bounded.
pub const VELOCITY_EPS: f64 = 0.05;

/// Full forward pass: embeds the four streams, runs every block, decodes
/// the image stream to a content estimate, and returns the velocity
/// `v = (x0_hat - z_t) / max(1 - t, eps)` toward that content.
///
/// The content parameterization is what makes a frozen random base
/// workable: the pull-back of the current state is exact algebra rather
/// than something low-rank adapters would have to approximate.
///
/// The caller supplies the parameter binder so it can afterwards map
/// parameter names to tape nodes (training reads gradients through it).
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &mut Bound<T>,
    config: &ModelConfig,
    inputs: &StreamInputs<T>,
    t: f64,
    mask: &StructuralMask<T>,
    active: AdapterSet,
) -> Result<ValueId> {
    config.validate()?;
    inputs.validate(config)?;
    assert!((0.0..=1.0).contains(&t), "timestep {t} outside [0, 1]");

    let d = config.d_model;

    // Patch embedding, shared by image, style and reference streams.
    let w_in = bound.get(tape, "base.embed.w_in")?;
    let b_in = bound.get(tape, "base.embed.b_in")?;
    let z_t = tape.constant(inputs.image_tokens);
    let embed = |tape: &mut Tape<T>, raw: Option<ValueId>, tokens: &Tensor<T>| -> Result<ValueId> {
        if tokens.rows() == 0 {
            // Nothing to project; keep the empty [0, d] shape.
            return Ok(tape.constant(&Tensor::zeros(vec![0, d])));
        }
        let x = match raw {
            Some(id) => id,
            None => tape.constant(tokens),
        };
        let x = tape.matmul(x, w_in)?;
        Ok(tape.add_row(x, b_in)?)
    };
    let image = embed(tape, Some(z_t), inputs.image_tokens)?;
    let style = embed(tape, None, inputs.style_tokens)?;
    let reference = embed(tape, None, inputs.ref_tokens)?;

    // Toy vocabulary lookup.
    let table = bound.store().get("base.embed.text")?;
    let mut text_rows = Vec::with_capacity(inputs.text_ids.len() * d);
    for &id in inputs.text_ids {
        text_rows.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    let text = tape.constant(&Tensor::new(vec![inputs.text_ids.len(), d], text_rows)?);

    let mut streams = TokenStreams {
        text,
        image,
        style,
        reference,
    };

    let mut positions = text_positions(inputs.text_ids.len());
    positions.extend_from_slice(inputs.image_pos);
    positions.extend_from_slice(inputs.style_pos);
    positions.extend_from_slice(inputs.ref_pos);
    let rope = rope_tables::<T>(&positions, config.head_dim());

    let t_image = sinusoidal_t_embed::<T>(t, d);
    let t_cond = sinusoidal_t_embed::<T>(0.0, d);
    let t_image = tape.constant(&t_image);
    let t_cond = tape.constant(&t_cond);

    for block in 0..config.n_layers {
        streams = forward_block(
            tape, bound, config, block, streams, &rope, mask, active, t_image, t_cond,
        )?;
    }

    let head_gain = bound.get(tape, "base.head.gain")?;
    let w_out = bound.get(tape, "base.head.w_out")?;
    let n = tape.rms_norm(streams.image, head_gain)?;
    let x0_hat = tape.matmul(n, w_out)?;

    let neg_zt = tape.scale(z_t, -1.0);
    let pull = tape.add(x0_hat, neg_zt)?;
    Ok(tape.scale(pull, 1.0 / (1.0 - t).max(VELOCITY_EPS)))
}
