//! Joint attention over the concatenated four-stream sequence.
//!
//! Each conditional stream projects through the shared base QKV plus its
//! own branch adapter; the concatenated sequence runs one multi-head
//! softmax attention under the structural bias, and the output splits back
//! into the original segments.

use super::{
    AdapterSet, Bound, Branch, ModelConfig, ModelError, Result, StreamLens, StructuralMask,
    TokenStreams,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};

/// Precomputed rotary angle tables for one concatenated sequence,
/// laid out `[rows × head_dim/2]`.
pub struct RopeTables<T: Scalar> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

pub(super) fn stream_branch(slot: usize, active: AdapterSet) -> Option<Branch> {
    match slot {
        0 => None, // text: always bare base
        1 => active.main.then_some(Branch::Main),
        2 => active.style.then_some(Branch::Style),
        3 => active.reference.then_some(Branch::Ref),
        _ => unreachable!(),
    }
}

/// Projects `x` through a base weight plus optional branch adapter.
pub(super) fn project<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &mut Bound<T>,
    config: &ModelConfig,
    x: ValueId,
    base_name: &str,
    adapter_name: Option<String>,
) -> Result<ValueId> {
    let w = bound.get(tape, base_name)?;
    match adapter_name {
        None => Ok(tape.matmul(x, w)?),
        Some(prefix) => {
            let a = bound.get(tape, &format!("{prefix}.a"))?;
            let b = bound.get(tape, &format!("{prefix}.b"))?;
            Ok(tape.linear_lora(x, w, a, b, config.lora_scale())?)
        }
    }
}

fn lens_of<T: Scalar>(tape: &Tape<T>, streams: &TokenStreams) -> StreamLens {
    let rows = |id: ValueId| tape.shape_of(id)[0];
    StreamLens::new(
        rows(streams.text),
        rows(streams.image),
        rows(streams.style),
        rows(streams.reference),
    )
}

/// One multi-head masked attention over all four streams.
pub fn joint_attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &mut Bound<T>,
    config: &ModelConfig,
    block: usize,
    streams: &TokenStreams,
    rope: &RopeTables<T>,
    mask: &StructuralMask<T>,
    active: AdapterSet,
) -> Result<TokenStreams> {
    let lens = lens_of(tape, streams);
    let slots = [
        streams.text,
        streams.image,
        streams.style,
        streams.reference,
    ];
    for &s in &slots {
        let w = tape.shape_of(s)[1];
        if w != config.d_model {
            return Err(ModelError::StreamWidth {
                got: w,
                want: config.d_model,
            });
        }
    }
    debug_assert_eq!(mask.lens, lens, "mask built for different segment lengths");

    let base = format!("base.block{block}.attn");
    let mut q_parts = Vec::with_capacity(4);
    let mut k_parts = Vec::with_capacity(4);
    let mut v_parts = Vec::with_capacity(4);
    for (slot, &x) in slots.iter().enumerate() {
        let branch = stream_branch(slot, active);
        let adapter = |proj: &str| {
            branch.map(|b| format!("adapter.{}.block{block}.attn.{proj}", b.prefix()))
        };
        q_parts.push(project(tape, bound, config, x, &format!("{base}.wq"), adapter("q"))?);
        k_parts.push(project(tape, bound, config, x, &format!("{base}.wk"), adapter("k"))?);
        v_parts.push(project(tape, bound, config, x, &format!("{base}.wv"), adapter("v"))?);
    }

    let q = tape.concat_rows(&q_parts)?;
    let k = tape.concat_rows(&k_parts)?;
    let v = tape.concat_rows(&v_parts)?;

    let dh = config.head_dim();
    let q = tape.rope(q, dh, &rope.cos, &rope.sin)?;
    let k = tape.rope(k, dh, &rope.cos, &rope.sin)?;

    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, inv_sqrt);
        let weights = tape.masked_softmax(logits, &mask.bias)?;
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let wo = bound.get(tape, &format!("{base}.wo"))?;
    let out = tape.matmul(merged, wo)?;

    let [oc, ot, os, _] = lens.offsets();
    Ok(TokenStreams {
        text: tape.slice_rows(out, oc, lens.text)?,
        image: tape.slice_rows(out, ot, lens.image)?,
        style: tape.slice_rows(out, os, lens.style)?,
        reference: tape.slice_rows(out, os + lens.style, lens.reference)?,
    })
}
