//! The four-stream transformer backbone.
//!
//! One frozen base model (projections, MLPs, norms, modulation, embedding,
//! output head) is shared by every stream; per-branch low-rank adapters on
//! the QKV projections and MLP layers are the only trainable parameters.

mod attention;
mod backbone;
mod block;
mod mask;

pub use attention::joint_attention;
pub use backbone::{
    grid_positions, model_forward, patchify, rope_tables, sinusoidal_t_embed, text_positions,
    unpatchify, StreamInputs, REF_POS_OFFSET, TEXT_POS_ROW,
};
pub use mask::{build_structural_mask, MaskPolicy, StructuralMask};

use crate::checkpoint::Checkpoint;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("no parameter named `{0}`")]
    MissingParam(String),
    #[error("stream width {got} does not match d_model {want}")]
    StreamWidth { got: usize, want: usize },
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Transformer dimensions and tokenizer geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_mult: usize,
    pub lora_rank: usize,
    pub patch_size: usize,
    pub image_hw: usize,
    pub ref_hw: usize,
    pub text_vocab: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            mlp_mult: 4,
            lora_rank: 16,
            patch_size: 4,
            image_hw: 64,
            ref_hw: 32,
            text_vocab: 8,
            max_text_len: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must divide by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(ModelError::BadConfig(format!(
                "head dim {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        if self.image_hw % self.patch_size != 0 || self.ref_hw % self.patch_size != 0 {
            return Err(ModelError::BadConfig(format!(
                "image sides {}/{} must divide by patch size {}",
                self.image_hw, self.ref_hw, self.patch_size
            )));
        }
        if self.lora_rank < 1 {
            return Err(ModelError::BadConfig("lora_rank must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of one flattened RGB patch token.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Patch-grid side of the main image.
    pub fn grid(&self) -> usize {
        self.image_hw / self.patch_size
    }

    pub fn ref_grid(&self) -> usize {
        self.ref_hw / self.patch_size
    }

    pub fn lora_scale(&self) -> f64 {
        1.0 / self.lora_rank as f64
    }
}

/// The three adapter-carrying branches. The text stream always runs on the
/// bare base weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Main,
    Style,
    Ref,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Main => "main",
            Branch::Style => "style",
            Branch::Ref => "ref",
        }
    }

    pub const ALL: [Branch; 3] = [Branch::Main, Branch::Style, Branch::Ref];
}

/// Which branch adapters participate in a forward pass. Inactive branches
/// fall back to the frozen base projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdapterSet {
    pub main: bool,
    pub style: bool,
    pub reference: bool,
}

impl AdapterSet {
    pub fn all() -> AdapterSet {
        AdapterSet {
            main: true,
            style: true,
            reference: true,
        }
    }

    pub fn none() -> AdapterSet {
        AdapterSet::default()
    }

    pub fn has(self, b: Branch) -> bool {
        match b {
            Branch::Main => self.main,
            Branch::Style => self.style,
            Branch::Ref => self.reference,
        }
    }

    pub fn with(mut self, b: Branch) -> AdapterSet {
        match b {
            Branch::Main => self.main = true,
            Branch::Style => self.style = true,
            Branch::Ref => self.reference = true,
        }
        self
    }
}

/// The four parallel token sequences flowing through a block, in the fixed
/// concatenation order text, image, style, reference.
#[derive(Clone, Copy, Debug)]
pub struct TokenStreams {
    pub text: ValueId,
    pub image: ValueId,
    pub style: ValueId,
    pub reference: ValueId,
}

/// Segment lengths of the concatenated sequence, same order as
/// [`TokenStreams`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamLens {
    pub text: usize,
    pub image: usize,
    pub style: usize,
    pub reference: usize,
}

impl StreamLens {
    pub fn new(text: usize, image: usize, style: usize, reference: usize) -> StreamLens {
        StreamLens {
            text,
            image,
            style,
            reference,
        }
    }

    pub fn total(&self) -> usize {
        self.text + self.image + self.style + self.reference
    }

    /// Start offset of each segment in concatenation order.
    pub fn offsets(&self) -> [usize; 4] {
        [
            0,
            self.text,
            self.text + self.image,
            self.text + self.image + self.style,
        ]
    }
}

/// One named parameter with its training status.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, name-indexed parameter set for the whole model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        assert_eq!(
            self.params[i].value.shape(),
            value.shape(),
            "parameter update changed shape of `{name}`"
        );
        self.params[i].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    /// Marks exactly the parameters whose names start with any of
    /// `prefixes` as trainable, everything else frozen.
    pub fn set_trainable_by_prefix(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Order-independent digest of every parameter whose name starts with
    /// `prefix`: names are visited sorted, values hashed as raw IEEE bytes.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, &i) in &self.index {
            if !name.starts_with(prefix) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            let p = &self.params[i];
            for &e in p.value.shape() {
                hasher.update((e as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(p.value.len() * T::BYTE_WIDTH);
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint
    where
        Tensor<T>: crate::checkpoint::IntoEntry,
    {
        let mut ck = Checkpoint::new();
        for p in &self.params {
            ck.push(p.name.clone(), p.value.clone());
        }
        ck
    }

    /// Restores every non-`meta.` tensor from `ck`. All parameters come
    /// back frozen; stage setup decides what trains.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<ParamStore<T>>
    where
        Tensor<T>: crate::checkpoint::IntoEntry,
    {
        let mut store = ParamStore::new();
        for name in ck.names() {
            if name.starts_with("meta.") {
                continue;
            }
            store.insert(name.to_string(), ck.get::<T>(name)?.clone(), false);
        }
        Ok(store)
    }
}

/// Memoizing binder from store parameters to tape leaves, so the single
/// base tensor backs every stream that projects through it.
pub struct Bound<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    ids: BTreeMap<usize, ValueId>,
}

impl<'s, T: Scalar> Bound<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Bound<'s, T> {
        Bound {
            store,
            ids: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<ValueId> {
        let i = *self
            .store
            .index
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if let Some(&id) = self.ids.get(&i) {
            return Ok(id);
        }
        let p = &self.store.params[i];
        let id = tape.leaf(&p.value, p.trainable);
        self.ids.insert(i, id);
        Ok(id)
    }

    /// Every parameter bound so far, as (name, tape node).
    pub fn resolved(&self) -> impl Iterator<Item = (&str, ValueId)> + '_ {
        self.ids
            .iter()
            .map(|(&i, &id)| (self.store.params[i].name.as_str(), id))
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

// ── initialization ──────────────────────────────────────────────────

use crate::rng::normal;

/// Builds the frozen base model. Deterministic in `seed`.
pub fn init_base<T: Scalar>(config: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let dp = config.patch_dim();
    let hidden = d * config.mlp_mult;
    let mut store = ParamStore::new();

    let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64| {
        Tensor::<T>::from_rng(vec![rows, cols], || normal(rng, sigma))
    };

    let s_in = 1.0 / (dp as f64).sqrt();
    store.insert("base.embed.w_in", mat(&mut rng, dp, d, s_in), false);
    store.insert(
        "base.embed.b_in",
        Tensor::from_rng(vec![1, d], || normal(&mut rng, 0.5)),
        false,
    );
    store.insert(
        "base.embed.text",
        mat(&mut rng, config.text_vocab, d, 0.5),
        false,
    );

    let s_d = 1.0 / (d as f64).sqrt();
    let s_h = 1.0 / (hidden as f64).sqrt();
    for i in 0..config.n_layers {
        let b = format!("base.block{i}");
        store.insert(format!("{b}.attn.gain"), Tensor::full(vec![d], T::ONE), false);
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{b}.attn.{w}"), mat(&mut rng, d, d, s_d), false);
        }
        store.insert(format!("{b}.mlp.gain"), Tensor::full(vec![d], T::ONE), false);
        store.insert(format!("{b}.mlp.w1"), mat(&mut rng, d, hidden, s_d), false);
        store.insert(format!("{b}.mlp.w2"), mat(&mut rng, hidden, d, s_h), false);
        store.insert(format!("{b}.mod.w"), mat(&mut rng, d, 4 * d, 0.1 * s_d), false);
    }

    store.insert("base.head.gain", Tensor::full(vec![d], T::ONE), false);
    store.insert(
        "base.head.w_out",
        mat(&mut rng, d, dp, 0.5 * s_d),
        false,
    );
    store
}

/// Attaches a fresh adapter pair set for `branch`: `A` small-uniform,
/// `B` zero, so the adapted model starts exactly equal to the base.
pub fn attach_adapters<T: Scalar>(
    store: &mut ParamStore<T>,
    config: &ModelConfig,
    branch: Branch,
    seed: u64,
    trainable: bool,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada7_0000);
    let d = config.d_model;
    let r = config.lora_rank;
    let hidden = d * config.mlp_mult;
    let lim = 1.0 / (d as f64).sqrt();
    let uniform = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        Tensor::<T>::from_rng(vec![rows, cols], || rng.random_range(-lim..lim))
    };
    for i in 0..config.n_layers {
        let b = format!("adapter.{}.block{i}", branch.prefix());
        for p in ["q", "k", "v"] {
            store.insert(format!("{b}.attn.{p}.a"), uniform(&mut rng, d, r), trainable);
            store.insert(format!("{b}.attn.{p}.b"), Tensor::zeros(vec![r, d]), trainable);
        }
        store.insert(format!("{b}.mlp.w1.a"), uniform(&mut rng, d, r), trainable);
        store.insert(
            format!("{b}.mlp.w1.b"),
            Tensor::zeros(vec![r, hidden]),
            trainable,
        );
        store.insert(
            format!("{b}.mlp.w2.a"),
            uniform(&mut rng, hidden, r),
            trainable,
        );
        store.insert(format!("{b}.mlp.w2.b"), Tensor::zeros(vec![r, d]), trainable);
    }
}

#[cfg(test)]
mod store_tests {
    use super::*;

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        c.d_model = 30;
        assert!(c.validate().is_err()); // 30 % 4 != 0
        c = ModelConfig::default();
        c.image_hw = 63;
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.lora_rank = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let c = ModelConfig::default();
        let a = init_base::<f32>(&c, 7);
        let b = init_base::<f32>(&c, 7);
        assert_eq!(a.hash_prefix("base."), b.hash_prefix("base."));
        let other = init_base::<f32>(&c, 8);
        assert_ne!(a.hash_prefix("base."), other.hash_prefix("base."));
    }

    #[test]
    fn hash_ignores_insertion_order() {
        let t1 = Tensor::<f32>::full(vec![2], 1.0);
        let t2 = Tensor::<f32>::full(vec![2], 2.0);
        let mut a = ParamStore::new();
        a.insert("x", t1.clone(), false);
        a.insert("y", t2.clone(), false);
        let mut b = ParamStore::new();
        b.insert("y", t2, false);
        b.insert("x", t1, false);
        assert_eq!(a.hash_prefix(""), b.hash_prefix(""));
    }

    #[test]
    fn checkpoint_round_trip_preserves_values() {
        let c = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let mut store = init_base::<f32>(&c, 3);
        attach_adapters(&mut store, &c, Branch::Ref, 3, true);
        let ck = store.to_checkpoint();
        let back = ParamStore::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(store.hash_prefix(""), back.hash_prefix(""));
        // Restored parameters come back frozen.
        assert!(back.trainable_names().is_empty());
    }

    #[test]
    fn adapters_start_as_zero_delta() {
        let c = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let mut store = init_base::<f32>(&c, 3);
        attach_adapters(&mut store, &c, Branch::Style, 9, true);
        let b = store.get("adapter.style.block0.attn.q.b").unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        let a = store.get("adapter.style.block0.attn.q.a").unwrap();
        assert!(a.data().iter().any(|&v| v != 0.0));
    }
}
