//! Inference: insert a reference object into a background at a mask.
//!
//! Builds the conditioning streams from user inputs, integrates the
//! learned velocity field with the Euler sampler, and composites the
//! generated content back over the untouched background outside the mask
//! (the region the user asked to leave alone).

use crate::data::Image;
use crate::flow::{euler_sample, sample_noise};
use crate::model::{
    grid_positions, model_forward, patchify, unpatchify, AdapterSet, Bound, MaskPolicy,
    ModelConfig, ParamStore, StreamInputs, StreamLens, StructuralMask, REF_POS_OFFSET,
};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{pixel_mask_to_tokens, Result, TrainError};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub struct ComposeOptions {
    pub steps: usize,
    pub seed: u64,
    pub mask_policy: MaskPolicy,
    /// When set, pixels outside the placement mask come from the provided
    /// background verbatim; the generated image fills only the mask.
    pub paste_back: bool,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        ComposeOptions {
            steps: 20,
            seed: 0,
            mask_policy: MaskPolicy::Structural,
            paste_back: true,
        }
    }
}

/// Generates the composited scene. Deterministic in (parameters, inputs,
/// seed, steps).
pub fn compose_image<T: Scalar>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    reference: &Image,
    background: &Image,
    mask: &Image,
    opts: &ComposeOptions,
) -> Result<Image> {
    if background.width() != config.image_hw
        || background.height() != config.image_hw
        || mask.width() != config.image_hw
        || mask.height() != config.image_hw
    {
        return Err(TrainError::BadSample {
            id: "compose".into(),
            stage: 3,
            why: format!(
                "background/mask must be {0}x{0} for this checkpoint",
                config.image_hw
            ),
        });
    }
    let grid = config.grid();
    let dp = config.patch_dim();

    let ref_img = if reference.width() != config.ref_hw {
        reference.resize_nearest(config.ref_hw, config.ref_hw)
    } else {
        reference.clone()
    };
    let ref_tokens = patchify(&ref_img.to_tensor::<T>(), config.patch_size)?;
    let ref_pos = grid_positions(config.ref_grid(), (REF_POS_OFFSET, REF_POS_OFFSET));

    let bg_tokens = patchify(&background.to_tensor::<T>(), config.patch_size)?;
    let hole = pixel_mask_to_tokens(mask, config.patch_size);
    let mut style = Vec::new();
    let mut style_pos = Vec::new();
    for (idx, &h) in hole.iter().enumerate() {
        if !h {
            style.extend_from_slice(&bg_tokens.data()[idx * dp..(idx + 1) * dp]);
            style_pos.push(((idx % grid) as i32, (idx / grid) as i32));
        }
    }
    let style_tokens = Tensor::new(vec![style_pos.len(), dp], style)?;
    let image_pos = grid_positions(grid, (0, 0));
    let text_ids = vec![0usize]; // no text prompt at inference
    let lens = StreamLens::new(1, grid * grid, style_pos.len(), ref_pos.len());
    let smask = StructuralMask::for_policy(opts.mask_policy, lens);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0xc0]));
    let z1 = sample_noise::<T>(vec![grid * grid, dp], &mut rng);

    let field = |z: &Tensor<T>, t: f64| -> crate::tensor::Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(store);
        let inputs = StreamInputs {
            text_ids: &text_ids,
            image_tokens: z,
            image_pos: &image_pos,
            style_tokens: &style_tokens,
            style_pos: &style_pos,
            ref_tokens: &ref_tokens,
            ref_pos: &ref_pos,
        };
        let v = model_forward(
            &mut tape,
            &mut bound,
            config,
            &inputs,
            t,
            &smask,
            AdapterSet::all(),
        )
        .map_err(|e| crate::tensor::TensorError::DimMismatch {
            op: "compose field",
            detail: e.to_string(),
        })?;
        Ok(tape.tensor(v))
    };

    let tokens = euler_sample(field, z1, opts.steps)?;
    let generated = unpatchify(&tokens, config.image_hw, config.patch_size, 3)?;
    let generated = Image::from_tensor(&generated);

    if !opts.paste_back {
        return Ok(generated);
    }
    let mut out = background.clone();
    for y in 0..config.image_hw {
        for x in 0..config.image_hw {
            if mask.mask_at(x, y) {
                let v = generated.px(x, y).to_vec();
                out.set_px(x, y, &v);
            }
        }
    }
    Ok(out)
}
