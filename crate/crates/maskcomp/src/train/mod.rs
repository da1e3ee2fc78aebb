//! The three-stage disentanglement protocol.
//!
//! Stage 1 trains the reference-branch adapters on (reference, scene)
//! pairs; stage 2 independently trains the style-branch adapters on
//! style-aware inpainting; stage 3 assembles both, frozen, and trains a
//! fresh main-branch adapter set under the structural mask. Every stage
//! verifies that its frozen complement never moves.

mod adam;

pub use adam::Adam;

use crate::checkpoint::Checkpoint;
use crate::data::LoadedSample;
use crate::flow::{flow_target, interpolate, mse_value, sample_noise};
use crate::model::{
    attach_adapters, grid_positions, init_base, model_forward, patchify, AdapterSet, Bound,
    Branch, MaskPolicy, ModelConfig, ModelError, ParamStore, StreamInputs, StreamLens,
    StructuralMask, REF_POS_OFFSET,
};
use crate::tensor::Tensor;
use crate::scalar::Scalar;
use crate::rng::derive_seed;
use crate::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("tensor: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("image: {0}")]
    Image(#[from] crate::data::ImageError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("frozen parameter set `{prefix}` changed during training")]
    FrozenDrift { prefix: String },
    #[error("base weights differ between checkpoints; refusing to assemble")]
    BaseMismatch,
    #[error("checkpoint carries no `{0}` adapters")]
    MissingAdapters(String),
    #[error("sample `{id}` unusable for stage {stage}: {why}")]
    BadSample { id: String, stage: u8, why: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Everything one training stage needs to know.
#[derive(Clone, Debug)]
pub struct StageSpec {
    pub stage: u8,
    /// Name prefixes of the trainable parameter set.
    pub trainable: Vec<String>,
    /// Adapter branches live in the forward pass.
    pub active: AdapterSet,
    pub mask_policy: MaskPolicy,
    /// Informational tag for provenance (data source id).
    pub data_source: String,
}

impl StageSpec {
    pub fn stage1(data_source: impl Into<String>) -> StageSpec {
        StageSpec {
            stage: 1,
            trainable: vec!["adapter.ref.".into()],
            active: AdapterSet::none().with(Branch::Ref),
            mask_policy: MaskPolicy::None,
            data_source: data_source.into(),
        }
    }

    pub fn stage2(data_source: impl Into<String>) -> StageSpec {
        StageSpec {
            stage: 2,
            trainable: vec!["adapter.style.".into()],
            active: AdapterSet::none().with(Branch::Style),
            mask_policy: MaskPolicy::None,
            data_source: data_source.into(),
        }
    }

    pub fn stage3(mask_policy: MaskPolicy, data_source: impl Into<String>) -> StageSpec {
        StageSpec {
            stage: 3,
            trainable: vec!["adapter.main.".into()],
            active: AdapterSet::all(),
            mask_policy,
            data_source: data_source.into(),
        }
    }

    /// Frozen complement: every top-level prefix not trainable this stage.
    pub fn frozen_prefixes(&self) -> Vec<String> {
        let mut out = vec!["base.".to_string()];
        for b in Branch::ALL {
            let p = format!("adapter.{}.", b.prefix());
            if !self.trainable.contains(&p) {
                out.push(p);
            }
        }
        out
    }
}

/// Loop knobs; the model geometry rides along so checkpoints are
/// self-describing.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub accumulation: usize,
    pub seed: u64,
    /// Frozen-set hash verification cadence, in steps.
    pub hash_check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            steps: 300,
            lr: 1e-3,
            batch: 1,
            accumulation: 2,
            seed: 0,
            hash_check_every: 100,
        }
    }
}

/// Step counter, frozen-set evidence, and the loss trace.
#[derive(Clone, Debug, Default)]
pub struct TrainState {
    pub step: usize,
    pub frozen_hashes: BTreeMap<String, String>,
    pub loss_history: Vec<(usize, f64)>,
    pub seed: u64,
}

/// One prepared training sample: clean tokens plus conditioning streams.
/// Noise and timestep are drawn fresh inside the step.
#[derive(Clone, Debug)]
pub struct ConditionedSample<T: Scalar> {
    pub id: String,
    pub z0: Tensor<T>,
    pub text_ids: Vec<usize>,
    pub image_pos: Vec<(i32, i32)>,
    pub style_tokens: Tensor<T>,
    pub style_pos: Vec<(i32, i32)>,
    pub ref_tokens: Tensor<T>,
    pub ref_pos: Vec<(i32, i32)>,
}

impl<T: Scalar> ConditionedSample<T> {
    pub fn lens(&self) -> StreamLens {
        StreamLens::new(
            self.text_ids.len(),
            self.z0.rows(),
            self.style_tokens.rows(),
            self.ref_tokens.rows(),
        )
    }

    fn inputs<'a>(&'a self, z_t: &'a Tensor<T>) -> StreamInputs<'a, T> {
        StreamInputs {
            text_ids: &self.text_ids,
            image_tokens: z_t,
            image_pos: &self.image_pos,
            style_tokens: &self.style_tokens,
            style_pos: &self.style_pos,
            ref_tokens: &self.ref_tokens,
            ref_pos: &self.ref_pos,
        }
    }
}

// ── stage batch builders ────────────────────────────────────────────

const TOKEN_THIS_ITEM: usize = 1;
const TOKEN_SCENE: usize = 2;
const TOKEN_EMPTY: usize = 0;

fn ref_token_grid<T: Scalar>(
    config: &ModelConfig,
    reference: &crate::data::Image,
) -> Result<(Tensor<T>, Vec<(i32, i32)>)> {
    let img = if reference.width() != config.ref_hw {
        reference.resize_nearest(config.ref_hw, config.ref_hw)
    } else {
        reference.clone()
    };
    let tokens = patchify(&img.to_tensor::<T>(), config.patch_size)?;
    let pos = grid_positions(config.ref_grid(), (REF_POS_OFFSET, REF_POS_OFFSET));
    Ok((tokens, pos))
}

/// Stage 1: reconstruct the clean scene conditioned on the reference.
pub fn stage1_sample<T: Scalar>(
    config: &ModelConfig,
    sample: &LoadedSample,
) -> Result<ConditionedSample<T>> {
    let z0 = patchify(&sample.i_c.to_tensor::<T>(), config.patch_size)?;
    let (ref_tokens, ref_pos) = ref_token_grid(config, &sample.i_f)?;
    Ok(ConditionedSample {
        id: sample.record.id.clone(),
        z0,
        text_ids: vec![TOKEN_THIS_ITEM],
        image_pos: grid_positions(config.grid(), (0, 0)),
        style_tokens: Tensor::zeros(vec![0, config.patch_dim()]),
        style_pos: vec![],
        ref_tokens,
        ref_pos,
    })
}

/// Grid-cell mask for stage-2 inpainting: a seeded rectangle covering a
/// quarter-to-third of the grid.
pub fn stage2_token_mask(grid: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x25]));
    let w = rng.random_range(grid / 3..=grid / 2 + 1);
    let h = rng.random_range(grid / 3..=grid / 2 + 1);
    let x0 = rng.random_range(0..=grid - w);
    let y0 = rng.random_range(0..=grid - h);
    let mut mask = vec![false; grid * grid];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            mask[y * grid + x] = true;
        }
    }
    mask
}

/// Stage 2: style-aware inpainting. The image stream carries only the
/// masked cells (the denoise target); retained cells feed the style
/// stream at their own grid positions. Degenerate masks (nothing or
/// everything masked) yield `None` so the caller can skip the sample.
pub fn stage2_sample<T: Scalar>(
    config: &ModelConfig,
    full_image: &crate::data::Image,
    token_mask: &[bool],
    id: &str,
) -> Result<Option<ConditionedSample<T>>> {
    let grid = config.grid();
    assert_eq!(token_mask.len(), grid * grid, "mask must cover the grid");
    let masked = token_mask.iter().filter(|&&m| m).count();
    if masked == 0 || masked == token_mask.len() {
        return Ok(None);
    }
    let all = patchify(&full_image.to_tensor::<T>(), config.patch_size)?;
    let dp = config.patch_dim();
    let mut z0 = Vec::new();
    let mut image_pos = Vec::new();
    let mut style = Vec::new();
    let mut style_pos = Vec::new();
    for (idx, &m) in token_mask.iter().enumerate() {
        let row = &all.data()[idx * dp..(idx + 1) * dp];
        let pos = ((idx % grid) as i32, (idx / grid) as i32);
        if m {
            z0.extend_from_slice(row);
            image_pos.push(pos);
        } else {
            style.extend_from_slice(row);
            style_pos.push(pos);
        }
    }
    Ok(Some(ConditionedSample {
        id: id.to_string(),
        z0: Tensor::new(vec![image_pos.len(), dp], z0)?,
        text_ids: vec![TOKEN_SCENE],
        image_pos,
        style_tokens: Tensor::new(vec![style_pos.len(), dp], style)?,
        style_pos,
        ref_tokens: Tensor::zeros(vec![0, dp]),
        ref_pos: vec![],
    }))
}

/// Pixel mask to grid-cell mask: a cell is a hole cell when any of its
/// pixels is masked.
pub fn pixel_mask_to_tokens(mask: &crate::data::Image, patch: usize) -> Vec<bool> {
    let grid = mask.width() / patch;
    let mut out = vec![false; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            'cell: for dy in 0..patch {
                for dx in 0..patch {
                    if mask.mask_at(gx * patch + dx, gy * patch + dy) {
                        out[gy * grid + gx] = true;
                        break 'cell;
                    }
                }
            }
        }
    }
    out
}

/// Stage 3: full composition. Target is the stylized composite; the style
/// stream carries the hole-free context cells of the same image; the
/// reference stream carries the foreground.
pub fn stage3_sample<T: Scalar>(
    config: &ModelConfig,
    sample: &LoadedSample,
) -> Result<ConditionedSample<T>> {
    for (what, ok) in [
        ("reference", sample.i_f.width() > 0),
        ("mask", sample.i_m.mask_area() > 0),
        ("target", sample.i_s.width() == config.image_hw),
        ("composite", sample.i_c.width() == config.image_hw),
    ] {
        if !ok {
            return Err(TrainError::BadSample {
                id: sample.record.id.clone(),
                stage: 3,
                why: format!("missing or malformed {what}"),
            });
        }
    }
    let grid = config.grid();
    let dp = config.patch_dim();
    let z0 = patchify(&sample.i_s.to_tensor::<T>(), config.patch_size)?;
    let hole = pixel_mask_to_tokens(&sample.i_m, config.patch_size);
    let mut style = Vec::new();
    let mut style_pos = Vec::new();
    for (idx, &h) in hole.iter().enumerate() {
        if !h {
            style.extend_from_slice(&z0.data()[idx * dp..(idx + 1) * dp]);
            style_pos.push(((idx % grid) as i32, (idx / grid) as i32));
        }
    }
    let (ref_tokens, ref_pos) = ref_token_grid(config, &sample.i_f)?;
    Ok(ConditionedSample {
        id: sample.record.id.clone(),
        z0,
        text_ids: vec![TOKEN_EMPTY],
        image_pos: grid_positions(grid, (0, 0)),
        style_tokens: Tensor::new(vec![style_pos.len(), dp], style)?,
        style_pos,
        ref_tokens,
        ref_pos,
    })
}

// ── the trainer ─────────────────────────────────────────────────────

pub struct Trainer<T: Scalar> {
    pub store: ParamStore<T>,
    pub spec: StageSpec,
    pub cfg: TrainConfig,
    pub state: TrainState,
    opt: Adam,
    pending: BTreeMap<String, Vec<f64>>,
    micro_in_window: usize,
}

impl<T: Scalar> Trainer<T>
where
    Tensor<T>: crate::checkpoint::IntoEntry,
{
    pub fn new(mut store: ParamStore<T>, spec: StageSpec, cfg: TrainConfig) -> Trainer<T> {
        let prefixes: Vec<&str> = spec.trainable.iter().map(|s| s.as_str()).collect();
        store.set_trainable_by_prefix(&prefixes);
        let mut frozen_hashes = BTreeMap::new();
        for p in spec.frozen_prefixes() {
            frozen_hashes.insert(p.clone(), store.hash_prefix(&p));
        }
        let state = TrainState {
            step: 0,
            frozen_hashes,
            loss_history: Vec::new(),
            seed: cfg.seed,
        };
        let opt = Adam::new(cfg.lr);
        Trainer {
            store,
            spec,
            cfg,
            state,
            opt,
            pending: BTreeMap::new(),
            micro_in_window: 0,
        }
    }

    /// Loss of one sample pushed onto a fresh tape, with gradients
    /// accumulated into `pending` (scaled by `weight`).
    fn accumulate_sample(
        &mut self,
        sample: &ConditionedSample<T>,
        t: f64,
        z1: &Tensor<T>,
        mask: &StructuralMask<T>,
        weight: f64,
    ) -> Result<f64> {
        let z_t = interpolate(&sample.z0, z1, t)?;
        let v_star = flow_target(&sample.z0, z1)?;
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.store);
        let inputs = sample.inputs(&z_t);
        let v_pred = model_forward(
            &mut tape,
            &mut bound,
            &self.cfg.model,
            &inputs,
            t,
            mask,
            self.spec.active,
        )?;
        let loss = tape.mse(v_pred, &v_star)?;
        let loss_val = tape.value(loss)[0].to_f64();
        if !loss_val.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.state.step,
            });
        }
        tape.backward(loss)?;
        for (name, id) in bound.resolved() {
            if let Some(g) = tape.grad(id) {
                let buf = self
                    .pending
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o += gv.to_f64() * weight;
                }
            }
        }
        Ok(loss_val)
    }

    /// One micro-batch: forward/backward on each sample, and a parameter
    /// update once `accumulation` micro-batches have been gathered.
    pub fn train_step(&mut self, batch: &[&ConditionedSample<T>]) -> Result<f64> {
        assert!(!batch.is_empty(), "empty micro-batch");
        let weight = 1.0 / (batch.len() * self.cfg.accumulation) as f64;
        let mut micro_loss = 0.0;
        for (i, sample) in batch.iter().enumerate() {
            let draw_seed = derive_seed(
                self.cfg.seed,
                &[self.spec.stage as u64, self.state.step as u64, i as u64],
            );
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            let t: f64 = rng.random_range(0.0..1.0);
            let z1 = sample_noise::<T>(sample.z0.shape().to_vec(), &mut rng);
            let mask = StructuralMask::for_policy(self.spec.mask_policy, sample.lens());
            micro_loss += self.accumulate_sample(sample, t, &z1, &mask, weight)?;
        }
        micro_loss /= batch.len() as f64;
        self.state.step += 1;
        self.state.loss_history.push((self.state.step, micro_loss));
        self.micro_in_window += 1;
        if self.micro_in_window == self.cfg.accumulation {
            let grads = std::mem::take(&mut self.pending);
            self.opt.step(&mut self.store, &grads);
            self.micro_in_window = 0;
        }
        if self.cfg.hash_check_every > 0 && self.state.step % self.cfg.hash_check_every == 0 {
            self.verify_frozen()?;
        }
        Ok(micro_loss)
    }

    /// Confirms the frozen complement is bitwise unchanged.
    pub fn verify_frozen(&self) -> Result<()> {
        for (prefix, want) in &self.state.frozen_hashes {
            if &self.store.hash_prefix(prefix) != want {
                return Err(TrainError::FrozenDrift {
                    prefix: prefix.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn updates_applied(&self) -> usize {
        self.opt.updates()
    }

    /// Gradient-free flow loss over a held-out slice with frozen per-index
    /// (t, noise) draws so values are comparable across checkpoints.
    pub fn holdout_loss(&self, holdout: &[ConditionedSample<T>]) -> Result<f64> {
        holdout_loss_for(&self.store, &self.cfg, &self.spec, holdout)
    }
}

/// Same evaluation path as `Trainer::holdout_loss` but usable on any
/// parameter store.
pub fn holdout_loss_for<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    spec: &StageSpec,
    holdout: &[ConditionedSample<T>],
) -> Result<f64> {
    assert!(!holdout.is_empty(), "empty holdout");
    let mut total = 0.0;
    for (i, sample) in holdout.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x401d, i as u64]));
        let t: f64 = rng.random_range(0.0..1.0);
        let z1 = sample_noise::<T>(sample.z0.shape().to_vec(), &mut rng);
        let z_t = interpolate(&sample.z0, &z1, t)?;
        let v_star = flow_target(&sample.z0, &z1)?;
        let mask = StructuralMask::for_policy(spec.mask_policy, sample.lens());
        let mut tape = Tape::new();
        let mut bound = Bound::new(store);
        let inputs = sample.inputs(&z_t);
        let v_pred = model_forward(&mut tape, &mut bound, &cfg.model, &inputs, t, &mask, spec.active)?;
        total += mse_value(&tape.tensor(v_pred), &v_star)?;
    }
    Ok(total / holdout.len() as f64)
}

/// Outcome of one stage run.
pub struct StageRun<T: Scalar> {
    pub store: ParamStore<T>,
    pub state: TrainState,
    pub holdout_initial: f64,
    pub holdout_final: f64,
}

pub fn run_stage<T: Scalar>(
    store: ParamStore<T>,
    spec: StageSpec,
    cfg: &TrainConfig,
    train: &[ConditionedSample<T>],
    holdout: &[ConditionedSample<T>],
) -> Result<StageRun<T>>
where
    Tensor<T>: crate::checkpoint::IntoEntry,
{
    assert!(!train.is_empty(), "no training samples");
    let mut trainer = Trainer::new(store, spec, cfg.clone());
    let holdout_initial = if holdout.is_empty() {
        f64::NAN
    } else {
        trainer.holdout_loss(holdout)?
    };
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xba7c4, step as u64]));
        let batch: Vec<&ConditionedSample<T>> = (0..cfg.batch)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        trainer.train_step(&batch)?;
    }
    trainer.verify_frozen()?;
    let holdout_final = if holdout.is_empty() {
        f64::NAN
    } else {
        trainer.holdout_loss(holdout)?
    };
    Ok(StageRun {
        store: trainer.store,
        state: trainer.state,
        holdout_initial,
        holdout_final,
    })
}

/// Stage 1: attaches reference adapters to the base and trains only them.
pub fn run_stage1<T: Scalar>(
    base: &ParamStore<T>,
    cfg: &TrainConfig,
    train: &[ConditionedSample<T>],
    holdout: &[ConditionedSample<T>],
) -> Result<StageRun<T>>
where
    Tensor<T>: crate::checkpoint::IntoEntry,
{
    let mut store = base.clone();
    attach_adapters(&mut store, &cfg.model, Branch::Ref, derive_seed(cfg.seed, &[1]), true);
    run_stage(store, StageSpec::stage1("stage1"), cfg, train, holdout)
}

/// Stage 2: attaches style adapters to the same base and trains only them.
pub fn run_stage2<T: Scalar>(
    base: &ParamStore<T>,
    cfg: &TrainConfig,
    train: &[ConditionedSample<T>],
    holdout: &[ConditionedSample<T>],
) -> Result<StageRun<T>>
where
    Tensor<T>: crate::checkpoint::IntoEntry,
{
    let mut store = base.clone();
    attach_adapters(&mut store, &cfg.model, Branch::Style, derive_seed(cfg.seed, &[2]), true);
    run_stage(store, StageSpec::stage2("stage2"), cfg, train, holdout)
}

/// Composes the stage-3 starting point: the shared base, the frozen
/// reference adapters from one checkpoint, the frozen style adapters from
/// the other (argument order does not matter), and a fresh zero-delta main
/// adapter set.
pub fn assemble_stage3<T: Scalar>(
    ck_a: &Checkpoint,
    ck_b: &Checkpoint,
    config: &ModelConfig,
    seed: u64,
) -> Result<ParamStore<T>>
where
    Tensor<T>: crate::checkpoint::IntoEntry,
{
    let a = ParamStore::<T>::from_checkpoint(ck_a)?;
    let b = ParamStore::<T>::from_checkpoint(ck_b)?;
    if a.hash_prefix("base.") != b.hash_prefix("base.") {
        return Err(TrainError::BaseMismatch);
    }
    let has = |s: &ParamStore<T>, p: &str| s.iter().any(|q| q.name.starts_with(p));
    let (ref_src, style_src) = if has(&a, "adapter.ref.") && has(&b, "adapter.style.") {
        (&a, &b)
    } else if has(&b, "adapter.ref.") && has(&a, "adapter.style.") {
        (&b, &a)
    } else if !has(&a, "adapter.ref.") && !has(&b, "adapter.ref.") {
        return Err(TrainError::MissingAdapters("ref".into()));
    } else {
        return Err(TrainError::MissingAdapters("style".into()));
    };

    let mut out = ParamStore::new();
    for p in ref_src.iter() {
        if p.name.starts_with("base.") {
            out.insert(p.name.clone(), p.value.clone(), false);
        }
    }
    for p in ref_src.iter() {
        if p.name.starts_with("adapter.ref.") {
            out.insert(p.name.clone(), p.value.clone(), false);
        }
    }
    for p in style_src.iter() {
        if p.name.starts_with("adapter.style.") {
            out.insert(p.name.clone(), p.value.clone(), false);
        }
    }
    attach_adapters(&mut out, config, Branch::Main, derive_seed(seed, &[3]), true);
    Ok(out)
}

/// Stage 3: trains the main adapters on composition quadruplets with the
/// chosen mask policy; reference and style adapters stay frozen.
pub fn run_stage3<T: Scalar>(
    assembled: ParamStore<T>,
    cfg: &TrainConfig,
    mask_policy: MaskPolicy,
    train: &[ConditionedSample<T>],
    holdout: &[ConditionedSample<T>],
) -> Result<StageRun<T>>
where
    Tensor<T>: crate::checkpoint::IntoEntry,
{
    run_stage(
        assembled,
        StageSpec::stage3(mask_policy, "stage3"),
        cfg,
        train,
        holdout,
    )
}

/// A training variant reachable purely through configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Everything trained at once on composition data, no mask.
    NaiveE2e,
    /// Stage 2 + 3 (no reference pre-training).
    NoSubject,
    /// Stage 1 + 3 (no style pre-training).
    NoStyle,
    /// Full protocol without the structural mask.
    NoMask,
    /// Full protocol with masked attention.
    Full,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        Some(match s {
            "naive-e2e" => Variant::NaiveE2e,
            "no-subject" => Variant::NoSubject,
            "no-style" => Variant::NoStyle,
            "no-mask" => Variant::NoMask,
            "full" => Variant::Full,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::NaiveE2e => "naive-e2e",
            Variant::NoSubject => "no-subject",
            Variant::NoStyle => "no-style",
            Variant::NoMask => "no-mask",
            Variant::Full => "full",
        }
    }

    pub fn uses_stage1(&self) -> bool {
        matches!(self, Variant::NoStyle | Variant::NoMask | Variant::Full)
    }

    pub fn uses_stage2(&self) -> bool {
        matches!(self, Variant::NoSubject | Variant::NoMask | Variant::Full)
    }

    pub fn stage3_mask(&self) -> MaskPolicy {
        match self {
            Variant::Full => MaskPolicy::Structural,
            _ => MaskPolicy::None,
        }
    }

    /// The stage-3 spec for this variant. Only the end-to-end variant
    /// trains more than the main adapters.
    pub fn stage3_spec(&self) -> StageSpec {
        match self {
            Variant::NaiveE2e => StageSpec {
                stage: 3,
                trainable: vec![
                    "adapter.main.".into(),
                    "adapter.ref.".into(),
                    "adapter.style.".into(),
                ],
                active: AdapterSet::all(),
                mask_policy: MaskPolicy::None,
                data_source: "stage3".into(),
            },
            v => StageSpec::stage3(v.stage3_mask(), "stage3"),
        }
    }
}

/// Builds the stage-3 starting store for a variant, pulling pre-trained
/// adapters from the supplied checkpoints where the variant wants them and
/// fresh zero-delta ones elsewhere.
pub fn assemble_variant<T: Scalar>(
    variant: Variant,
    base: &ParamStore<T>,
    ck1: Option<&Checkpoint>,
    ck2: Option<&Checkpoint>,
    config: &ModelConfig,
    seed: u64,
) -> Result<ParamStore<T>>
where
    Tensor<T>: crate::checkpoint::IntoEntry,
{
    match (variant.uses_stage1(), variant.uses_stage2()) {
        (true, true) => {
            let (Some(c1), Some(c2)) = (ck1, ck2) else {
                return Err(TrainError::MissingAdapters(
                    "both stage checkpoints required".into(),
                ));
            };
            assemble_stage3(c1, c2, config, seed)
        }
        (true, false) => {
            let Some(c1) = ck1 else {
                return Err(TrainError::MissingAdapters("ref".into()));
            };
            let loaded = ParamStore::<T>::from_checkpoint(c1)?;
            if loaded.hash_prefix("base.") != base.hash_prefix("base.") {
                return Err(TrainError::BaseMismatch);
            }
            let mut out = base.clone();
            for p in loaded.iter() {
                if p.name.starts_with("adapter.ref.") {
                    out.insert(p.name.clone(), p.value.clone(), false);
                }
            }
            attach_adapters(&mut out, config, Branch::Style, derive_seed(seed, &[2]), false);
            attach_adapters(&mut out, config, Branch::Main, derive_seed(seed, &[3]), true);
            Ok(out)
        }
        (false, true) => {
            let Some(c2) = ck2 else {
                return Err(TrainError::MissingAdapters("style".into()));
            };
            let loaded = ParamStore::<T>::from_checkpoint(c2)?;
            if loaded.hash_prefix("base.") != base.hash_prefix("base.") {
                return Err(TrainError::BaseMismatch);
            }
            let mut out = base.clone();
            attach_adapters(&mut out, config, Branch::Ref, derive_seed(seed, &[1]), false);
            for p in loaded.iter() {
                if p.name.starts_with("adapter.style.") {
                    out.insert(p.name.clone(), p.value.clone(), false);
                }
            }
            attach_adapters(&mut out, config, Branch::Main, derive_seed(seed, &[3]), true);
            Ok(out)
        }
        (false, false) => {
            let mut out = base.clone();
            attach_adapters(&mut out, config, Branch::Ref, derive_seed(seed, &[1]), true);
            attach_adapters(&mut out, config, Branch::Style, derive_seed(seed, &[2]), true);
            attach_adapters(&mut out, config, Branch::Main, derive_seed(seed, &[3]), true);
            Ok(out)
        }
    }
}

// ── checkpoint helpers ──────────────────────────────────────────────

/// Serializes a store plus the model geometry and nominal stream segment
/// lengths as named header scalars.
pub fn to_checkpoint_with_meta<T: Scalar>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    stage: u8,
) -> Checkpoint
where
    Tensor<T>: crate::checkpoint::IntoEntry,
{
    let mut ck = store.to_checkpoint();
    ck.push_scalar("meta.stage", stage as f64);
    ck.push_scalar("meta.d_model", config.d_model as f64);
    ck.push_scalar("meta.n_heads", config.n_heads as f64);
    ck.push_scalar("meta.n_layers", config.n_layers as f64);
    ck.push_scalar("meta.mlp_mult", config.mlp_mult as f64);
    ck.push_scalar("meta.lora_rank", config.lora_rank as f64);
    ck.push_scalar("meta.patch_size", config.patch_size as f64);
    ck.push_scalar("meta.image_hw", config.image_hw as f64);
    ck.push_scalar("meta.ref_hw", config.ref_hw as f64);
    ck.push_scalar("meta.text_vocab", config.text_vocab as f64);
    ck.push_scalar("meta.max_text_len", config.max_text_len as f64);
    ck.push_scalar("meta.len_text", 1.0);
    ck.push_scalar("meta.len_image", (config.grid() * config.grid()) as f64);
    ck.push_scalar("meta.len_style", (config.grid() * config.grid()) as f64);
    ck.push_scalar(
        "meta.len_ref",
        (config.ref_grid() * config.ref_grid()) as f64,
    );
    ck
}

/// Reads the model geometry back out of a checkpoint's meta scalars.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<usize> {
        Ok(ck.get_scalar(name).map(|v| v as usize)?)
    };
    let config = ModelConfig {
        d_model: get("meta.d_model")?,
        n_heads: get("meta.n_heads")?,
        n_layers: get("meta.n_layers")?,
        mlp_mult: get("meta.mlp_mult")?,
        lora_rank: get("meta.lora_rank")?,
        patch_size: get("meta.patch_size")?,
        image_hw: get("meta.image_hw")?,
        ref_hw: get("meta.ref_hw")?,
        text_vocab: get("meta.text_vocab")?,
        max_text_len: get("meta.max_text_len")?,
    };
    config.validate()?;
    Ok(config)
}

pub use crate::model::init_base as init_base_model;

/// Convenience: base store for a config and seed (used by every pipeline
/// entry point so stages agree on the frozen foundation).
pub fn shared_base<T: Scalar>(config: &ModelConfig, seed: u64) -> ParamStore<T> {
    init_base(config, derive_seed(seed, &[0xba5e]))
}
