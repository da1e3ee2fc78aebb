//! Pre-norm transformer block with timestep modulation.
//!
//! The image stream is modulated by the sample's timestep embedding; the
//! conditional streams (text, style, reference) carry clean tokens and are
//! modulated at t = 0 instead.

use super::attention::{joint_attention, project, stream_branch, RopeTables};
use super::{AdapterSet, Bound, ModelConfig, Result, StructuralMask, TokenStreams};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Shift/scale pairs for the attention and MLP phases, derived from one
/// timestep embedding through the block's modulation weight.
struct Modulation {
    shift_attn: ValueId,
    scale_attn: ValueId,
    shift_mlp: ValueId,
    scale_mlp: ValueId,
}

fn modulation<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &mut Bound<T>,
    block: usize,
    d: usize,
    t_embed: ValueId,
) -> Result<Modulation> {
    let w = bound.get(tape, &format!("base.block{block}.mod.w"))?;
    let m = tape.matmul(t_embed, w)?;
    Ok(Modulation {
        shift_attn: tape.slice_cols(m, 0, d)?,
        scale_attn: tape.slice_cols(m, d, d)?,
        shift_mlp: tape.slice_cols(m, 2 * d, d)?,
        scale_mlp: tape.slice_cols(m, 3 * d, d)?,
    })
}

/// `norm(x) * (1 + scale) + shift`
fn modulated_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    gain: ValueId,
    shift: ValueId,
    scale: ValueId,
    ones: ValueId,
) -> Result<ValueId> {
    let n = tape.rms_norm(x, gain)?;
    let one_plus = tape.add(scale, ones)?;
    let n = tape.mul_row(n, one_plus)?;
    Ok(tape.add_row(n, shift)?)
}

/// One full block: joint attention then per-stream MLP, both residual.
#[allow(clippy::too_many_arguments)]
pub fn forward_block<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &mut Bound<T>,
    config: &ModelConfig,
    block: usize,
    streams: TokenStreams,
    rope: &RopeTables<T>,
    mask: &StructuralMask<T>,
    active: AdapterSet,
    t_embed_image: ValueId,
    t_embed_cond: ValueId,
) -> Result<TokenStreams> {
    let d = config.d_model;
    let ones = tape.constant(&Tensor::full(vec![1, d], T::ONE));
    let mod_image = modulation(tape, bound, block, d, t_embed_image)?;
    let mod_cond = modulation(tape, bound, block, d, t_embed_cond)?;

    let attn_gain = bound.get(tape, &format!("base.block{block}.attn.gain"))?;
    let slot_mod = |slot: usize| -> &Modulation {
        if slot == 1 {
            &mod_image
        } else {
            &mod_cond
        }
    };

    // Attention phase.
    let xs = [
        streams.text,
        streams.image,
        streams.style,
        streams.reference,
    ];
    let mut normed = [None; 4];
    for (slot, &x) in xs.iter().enumerate() {
        let m = slot_mod(slot);
        normed[slot] = Some(modulated_norm(
            tape,
            x,
            attn_gain,
            m.shift_attn,
            m.scale_attn,
            ones,
        )?);
    }
    let attn_in = TokenStreams {
        text: normed[0].unwrap(),
        image: normed[1].unwrap(),
        style: normed[2].unwrap(),
        reference: normed[3].unwrap(),
    };
    let attn_out = joint_attention(tape, bound, config, block, &attn_in, rope, mask, active)?;
    let after_attn = [
        tape.add(streams.text, attn_out.text)?,
        tape.add(streams.image, attn_out.image)?,
        tape.add(streams.style, attn_out.style)?,
        tape.add(streams.reference, attn_out.reference)?,
    ];

    // MLP phase.
    let mlp_gain = bound.get(tape, &format!("base.block{block}.mlp.gain"))?;
    let mut out = [None; 4];
    for (slot, &x) in after_attn.iter().enumerate() {
        let m = slot_mod(slot);
        let n = modulated_norm(tape, x, mlp_gain, m.shift_mlp, m.scale_mlp, ones)?;
        let branch = stream_branch(slot, active);
        let adapter = |layer: &str| {
            branch.map(|b| format!("adapter.{}.block{block}.mlp.{layer}", b.prefix()))
        };
        let h = project(
            tape,
            bound,
            config,
            n,
            &format!("base.block{block}.mlp.w1"),
            adapter("w1"),
        )?;
        let h = tape.silu(h);
        let h = project(
            tape,
            bound,
            config,
            h,
            &format!("base.block{block}.mlp.w2"),
            adapter("w2"),
        )?;
        out[slot] = Some(tape.add(x, h)?);
    }

    Ok(TokenStreams {
        text: out[0].unwrap(),
        image: out[1].unwrap(),
        style: out[2].unwrap(),
        reference: out[3].unwrap(),
    })
}
