//! Pipeline orchestration shared by the CLI and the acceptance suite.

use crate::checkpoint::Checkpoint;
use crate::compose::{compose_image, ComposeOptions};
use crate::config::KvConfig;
use crate::data::{load_sample, Image, SampleRecord};
use crate::eval::ComposeInput;
use crate::model::{MaskPolicy, ModelConfig, ParamStore};
use crate::rng::derive_seed;
use crate::train::{
    assemble_variant, config_from_checkpoint, run_stage, shared_base, stage1_sample,
    stage2_sample, stage2_token_mask, stage3_sample, to_checkpoint_with_meta, ConditionedSample,
    Result, StageRun, TrainConfig, TrainError, Variant,
};
use std::path::Path;

/// Model geometry and loop knobs out of a key-value config, with the
/// library defaults for anything unspecified.
pub fn train_config_from_kv(kv: &KvConfig, seed: u64) -> std::result::Result<TrainConfig, crate::config::ConfigError> {
    let d = ModelConfig::default();
    let model = ModelConfig {
        d_model: kv.parse_or("model.d_model", "int", d.d_model)?,
        n_heads: kv.parse_or("model.n_heads", "int", d.n_heads)?,
        n_layers: kv.parse_or("model.n_layers", "int", d.n_layers)?,
        mlp_mult: kv.parse_or("model.mlp_mult", "int", d.mlp_mult)?,
        lora_rank: kv.parse_or("model.lora_rank", "int", d.lora_rank)?,
        patch_size: kv.parse_or("model.patch_size", "int", d.patch_size)?,
        image_hw: kv.parse_or("model.image_hw", "int", d.image_hw)?,
        ref_hw: kv.parse_or("model.ref_hw", "int", d.ref_hw)?,
        text_vocab: kv.parse_or("model.text_vocab", "int", d.text_vocab)?,
        max_text_len: kv.parse_or("model.max_text_len", "int", d.max_text_len)?,
    };
    Ok(TrainConfig {
        model,
        steps: kv.parse_or("steps", "int", 300)?,
        lr: kv.parse_or("lr", "float", 1e-3)?,
        batch: kv.parse_or("batch", "int", 1)?,
        accumulation: kv.parse_or("accumulation", "int", 2)?,
        seed,
        hash_check_every: kv.parse_or("hash_check_every", "int", 100)?,
    })
}

pub struct StageDataSet<T: crate::scalar::Scalar> {
    pub train: Vec<ConditionedSample<T>>,
    pub holdout: Vec<ConditionedSample<T>>,
}

/// Builds the stage's conditioned samples from a manifest: `train` split
/// trains, `val` split is the held-out slice (with a carve-out from the
/// train head when the manifest has no val records).
pub fn prepare_stage_data<T: crate::scalar::Scalar>(
    stage: u8,
    base_dir: impl AsRef<Path>,
    records: &[SampleRecord],
    config: &ModelConfig,
    seed: u64,
) -> Result<StageDataSet<T>> {
    let base = base_dir.as_ref();
    let mut train_recs: Vec<&SampleRecord> = records.iter().filter(|r| r.split == "train").collect();
    let mut hold_recs: Vec<&SampleRecord> = records.iter().filter(|r| r.split == "val").collect();
    if hold_recs.is_empty() && train_recs.len() >= 5 {
        let n = (train_recs.len() / 10).clamp(1, 16);
        hold_recs = train_recs.drain(..n).collect();
    }
    let build = |recs: &[&SampleRecord]| -> Result<Vec<ConditionedSample<T>>> {
        let mut out = Vec::with_capacity(recs.len());
        for (i, r) in recs.iter().enumerate() {
            let s = load_sample(base, r)?;
            match stage {
                1 => out.push(stage1_sample(config, &s)?),
                2 => {
                    let mask = stage2_token_mask(config.grid(), derive_seed(seed, &[0x52, i as u64]));
                    if let Some(cs) = stage2_sample(config, &s.i_s, &mask, &r.id)? {
                        out.push(cs);
                    } else {
                        eprintln!("warning: skipping `{}`: degenerate inpainting mask", r.id);
                    }
                }
                3 => out.push(stage3_sample(config, &s)?),
                other => panic!("no stage {other}"),
            }
        }
        Ok(out)
    };
    Ok(StageDataSet {
        train: build(&train_recs)?,
        holdout: build(&hold_recs)?,
    })
}

/// Runs one training stage the way the CLI does, returning the run and the
/// serialized checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_training_stage(
    stage: u8,
    variant: Variant,
    cfg: &TrainConfig,
    data: &StageDataSet<f32>,
    ckpt1: Option<&Checkpoint>,
    ckpt2: Option<&Checkpoint>,
) -> Result<(StageRun<f32>, Checkpoint)> {
    let base = shared_base::<f32>(&cfg.model, cfg.seed);
    let run = match stage {
        1 => crate::train::run_stage1(&base, cfg, &data.train, &data.holdout)?,
        2 => crate::train::run_stage2(&base, cfg, &data.train, &data.holdout)?,
        3 => {
            let assembled = assemble_variant::<f32>(
                variant,
                &base,
                ckpt1,
                ckpt2,
                &cfg.model,
                cfg.seed,
            )?;
            let spec = variant.stage3_spec();
            run_stage(assembled, spec, cfg, &data.train, &data.holdout)?
        }
        other => panic!("no stage {other}"),
    };
    let ck = to_checkpoint_with_meta(&run.store, &cfg.model, stage);
    Ok((run, ck))
}

/// Loads a checkpoint into a parameter store plus its model geometry.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, ModelConfig)> {
    let ck = Checkpoint::load(path)?;
    let config = config_from_checkpoint(&ck)?;
    let store = ParamStore::<f32>::from_checkpoint(&ck)?;
    Ok((store, config))
}

/// A benchmark compositor backed by a trained model. The mask policy is
/// read from the checkpoint's stage-3 training unless overridden.
pub struct ModelCompositor {
    pub store: ParamStore<f32>,
    pub config: ModelConfig,
    pub steps: usize,
    pub mask_policy: MaskPolicy,
}

impl ModelCompositor {
    pub fn compose(&self, input: &ComposeInput) -> std::result::Result<Image, String> {
        compose_image(
            &self.store,
            &self.config,
            input.reference,
            input.background,
            input.mask,
            &ComposeOptions {
                steps: self.steps,
                seed: input.seed,
                mask_policy: self.mask_policy,
                paste_back: true,
            },
        )
        .map_err(|e| e.to_string())
    }
}

/// Writes the per-step loss trace the CLI ships next to checkpoints.
pub fn write_loss_log(
    path: impl AsRef<Path>,
    run: &StageRun<f32>,
) -> std::io::Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in &run.state.loss_history {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out.push_str(&format!("# holdout_initial = {}\n", run.holdout_initial));
    out.push_str(&format!("# holdout_final = {}\n", run.holdout_final));
    std::fs::write(path, out)
}

/// Maps stage-checkpoint requirements for the CLI: stage 3 variants name
/// exactly which checkpoints they need.
pub fn required_checkpoints(stage: u8, variant: Variant) -> (bool, bool) {
    if stage != 3 {
        return (false, false);
    }
    (variant.uses_stage1(), variant.uses_stage2())
}

pub fn missing_checkpoint_error(variant: Variant) -> TrainError {
    TrainError::MissingAdapters(format!(
        "stage 3 `{}` needs its pre-trained stage checkpoints",
        variant.name()
    ))
}
