//! Command-line entry point wiring the pipeline together.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use maskcomp::checkpoint::Checkpoint;
use maskcomp::compose::{compose_image, ComposeOptions};
use maskcomp::config::KvConfig;
use maskcomp::curate::{calibrate_thresholds, filter_dataset, CurationEmbedders, FilterThresholds};
use maskcomp::data::{build_dataset, read_manifest, style_library, GenConfig, Image, write_manifest};
use maskcomp::eval::{
    copy_paste_compositor, run_benchmark, ComposeInput, CompositorFn, EvalConfig, EvalEmbedders,
};
use maskcomp::model::MaskPolicy;
use maskcomp::pipeline::{
    load_model, prepare_stage_data, required_checkpoints, run_training_stage,
    train_config_from_kv, write_loss_log, ModelCompositor,
};
use maskcomp::train::Variant;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "maskcomp", version, about = "Cross-domain object composition pipeline")]
struct Cli {
    /// Root seed; falls back to the MC_SEED environment variable, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        /// Key-value generation config (count, corruption_rate, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sample count override.
        #[arg(long)]
        count: Option<usize>,
        /// Fraction of samples planted as labeled negatives.
        #[arg(long)]
        corruption_rate: Option<f64>,
    },
    /// Calibrate filter thresholds on a labeled manifest.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        rejection_cap: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the two-stage filter cascade over a manifest.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage of the protocol.
    Train {
        #[arg(long)]
        stage: u8,
        /// Key-value training config (steps, lr, model.* ...).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint (stage 3 only).
        #[arg(long)]
        ckpt1: Option<PathBuf>,
        /// Stage-2 checkpoint (stage 3 only).
        #[arg(long)]
        ckpt2: Option<PathBuf>,
        /// Training variant for stage 3.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Insert a reference object into a background at a mask.
    Compose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        background: PathBuf,
        /// Binary placement mask (white = insert here).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Disable the structural attention mask (ablation).
        #[arg(long)]
        no_structural_mask: bool,
    },
    /// Score compositors on the bench split of a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// `copy-paste`, `stylize-oracle`, or `model=PATH.mckp`.
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Emit the training configs reproducing each ablation variant.
    Ablate {
        /// naive-e2e | no-subject | no-style | no-mask | full
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_seed(flag: Option<u64>, kv: Option<&KvConfig>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Some(kv) = kv {
        if let Some(s) = kv.get("seed").and_then(|v| v.parse().ok()) {
            return s;
        }
    }
    std::env::var("MC_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            corruption_rate,
        } => {
            let kv = match &config {
                Some(p) => KvConfig::load(p).context("reading gen config")?,
                None => KvConfig::new(),
            };
            let seed = resolve_seed(cli.seed, Some(&kv));
            let styles = match kv.get("styles") {
                Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
                None => style_library().into_iter().map(|s| s.id).collect(),
            };
            let gen = GenConfig {
                count: count
                    .or(kv.parse("count", "int")?)
                    .unwrap_or(100),
                seed,
                corruption_rate: corruption_rate
                    .or(kv.parse("corruption_rate", "float")?)
                    .unwrap_or(0.0),
                styles,
                train_frac: kv.parse_or("train_frac", "float", 0.8)?,
                val_frac: kv.parse_or("val_frac", "float", 0.1)?,
            };
            let records = build_dataset(&gen, &out).context("generating dataset")?;
            let mut resolved = KvConfig::new();
            resolved.set("count", gen.count);
            resolved.set("seed", gen.seed);
            resolved.set("corruption_rate", gen.corruption_rate);
            resolved.set("styles", gen.styles.join(","));
            resolved.set("train_frac", gen.train_frac);
            resolved.set("val_frac", gen.val_frac);
            resolved.write_resolved(&out, "gen-data")?;
            println!(
                "wrote {} records to {}",
                records.len(),
                out.join("manifest.jsonl").display()
            );
            Ok(())
        }

        Command::Calibrate {
            manifest,
            rejection_cap,
            out,
        } => {
            if !(0.0..=1.0).contains(&rejection_cap) {
                bail!("--rejection-cap must lie in [0, 1]");
            }
            let records = read_manifest(&manifest).context("reading manifest")?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let labeled = records.iter().filter(|r| r.label.is_some()).count();
            if labeled == 0 {
                bail!("manifest `{}` has no labeled records to calibrate on", manifest.display());
            }
            let emb = CurationEmbedders::default();
            let thresholds = calibrate_thresholds(base, &records, rejection_cap, &emb)
                .context("calibrating thresholds")?;
            thresholds.save(&out).context("writing thresholds")?;
            let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut resolved = KvConfig::new();
            resolved.set("manifest", manifest.display());
            resolved.set("rejection_cap", rejection_cap);
            resolved.set("labeled_records", labeled);
            resolved.set("t_clip", thresholds.t_clip);
            resolved.set("t_dino", thresholds.t_dino);
            resolved.set("t_csd", thresholds.t_csd);
            resolved.write_resolved(dir, "calibrate")?;
            println!(
                "thresholds: clip {:.4} dino {:.4} csd {:.4} -> {}",
                thresholds.t_clip,
                thresholds.t_dino,
                thresholds.t_csd,
                out.display()
            );
            Ok(())
        }

        Command::Filter {
            manifest,
            thresholds,
            out,
        } => {
            let records = read_manifest(&manifest).context("reading manifest")?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let t = FilterThresholds::load(&thresholds).context("reading thresholds")?;
            let emb = CurationEmbedders::default();
            let (accepted, rejected) =
                filter_dataset(base, &records, &t, &emb).context("running cascade")?;
            std::fs::create_dir_all(&out)?;
            write_manifest(out.join("accepted.jsonl"), &accepted)?;
            write_manifest(out.join("rejected.jsonl"), &rejected)?;
            let mut resolved = KvConfig::new();
            resolved.set("manifest", manifest.display());
            resolved.set("thresholds", thresholds.display());
            resolved.set("accepted", accepted.len());
            resolved.set("rejected", rejected.len());
            resolved.write_resolved(&out, "filter")?;
            println!(
                "accepted {} / rejected {} -> {}",
                accepted.len(),
                rejected.len(),
                out.display()
            );
            Ok(())
        }

        Command::Train {
            stage,
            config,
            data,
            out,
            ckpt1,
            ckpt2,
            variant,
        } => {
            if !(1..=3).contains(&stage) {
                bail!("--stage must be 1, 2 or 3");
            }
            let variant = Variant::parse(&variant)
                .with_context(|| format!("unknown variant `{variant}`"))?;
            let kv = match &config {
                Some(p) => KvConfig::load(p).context("reading train config")?,
                None => KvConfig::new(),
            };
            let seed = resolve_seed(cli.seed, Some(&kv));
            let cfg = train_config_from_kv(&kv, seed)?;

            let (need1, need2) = required_checkpoints(stage, variant);
            if need1 && ckpt1.is_none() {
                bail!("train --stage 3 --variant {} requires --ckpt1 (stage-1 checkpoint)", variant.name());
            }
            if need2 && ckpt2.is_none() {
                bail!("train --stage 3 --variant {} requires --ckpt2 (stage-2 checkpoint)", variant.name());
            }
            let c1 = match &ckpt1 {
                Some(p) => Some(Checkpoint::load(p).context("reading --ckpt1")?),
                None => None,
            };
            let c2 = match &ckpt2 {
                Some(p) => Some(Checkpoint::load(p).context("reading --ckpt2")?),
                None => None,
            };

            let records = read_manifest(&data).context("reading manifest")?;
            let base_dir = data.parent().unwrap_or(Path::new("."));
            let dataset = prepare_stage_data::<f32>(stage, base_dir, &records, &cfg.model, seed)?;
            if dataset.train.is_empty() {
                bail!("manifest `{}` has no usable train-split records", data.display());
            }
            let (run, ck) =
                run_training_stage(stage, variant, &cfg, &dataset, c1.as_ref(), c2.as_ref())?;
            std::fs::create_dir_all(&out)?;
            let ck_path = out.join(format!("stage{stage}.mckp"));
            ck.save(&ck_path).context("writing checkpoint")?;
            write_loss_log(out.join("loss.csv"), &run)?;

            let mut resolved = KvConfig::new();
            resolved.set("stage", stage);
            resolved.set("variant", variant.name());
            resolved.set("data", data.display());
            resolved.set("steps", cfg.steps);
            resolved.set("lr", cfg.lr);
            resolved.set("batch", cfg.batch);
            resolved.set("accumulation", cfg.accumulation);
            resolved.set("seed", seed);
            resolved.set("mask_policy", format!("{:?}", variant.stage3_mask()));
            resolved.set("model.d_model", cfg.model.d_model);
            resolved.set("model.n_heads", cfg.model.n_heads);
            resolved.set("model.n_layers", cfg.model.n_layers);
            resolved.set("model.mlp_mult", cfg.model.mlp_mult);
            resolved.set("model.lora_rank", cfg.model.lora_rank);
            if let Some(p) = &ckpt1 {
                resolved.set("ckpt1", p.display());
            }
            if let Some(p) = &ckpt2 {
                resolved.set("ckpt2", p.display());
            }
            resolved.write_resolved(&out, "train")?;
            println!(
                "stage {stage} ({}) done: holdout {:.4} -> {:.4}; checkpoint {}",
                variant.name(),
                run.holdout_initial,
                run.holdout_final,
                ck_path.display()
            );
            Ok(())
        }

        Command::Compose {
            ckpt,
            reference,
            background,
            mask,
            out,
            steps,
            no_structural_mask,
        } => {
            let seed = resolve_seed(cli.seed, None);
            let (store, config) = load_model(&ckpt)?;
            let reference_img = Image::load_png(&reference).context("reading --reference")?;
            let background_img = Image::load_png(&background).context("reading --background")?;
            let mask_img = Image::load_png(&mask).context("reading --mask")?;
            if !mask_img.is_binary() {
                bail!("--mask must be a binary image (0/255)");
            }
            let opts = ComposeOptions {
                steps,
                seed,
                mask_policy: if no_structural_mask {
                    MaskPolicy::None
                } else {
                    MaskPolicy::Structural
                },
                paste_back: true,
            };
            let result = compose_image(&store, &config, &reference_img, &background_img, &mask_img, &opts)?;
            result.save_png(&out).context("writing output image")?;
            let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut resolved = KvConfig::new();
            resolved.set("ckpt", ckpt.display());
            resolved.set("reference", reference.display());
            resolved.set("background", background.display());
            resolved.set("mask", mask.display());
            resolved.set("steps", steps);
            resolved.set("seed", seed);
            resolved.set("structural_mask", !no_structural_mask);
            resolved.write_resolved(dir, "compose")?;
            println!("composed -> {}", out.display());
            Ok(())
        }

        Command::Evaluate {
            manifest,
            methods,
            out,
            format,
            steps,
        } => {
            if format != "text" && format != "jsonl" {
                bail!("--format must be `text` or `jsonl`");
            }
            let seed = resolve_seed(cli.seed, None);
            let records = read_manifest(&manifest).context("reading manifest")?;
            let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
            let bench: Vec<_> = records
                .iter()
                .filter(|r| r.split == "bench")
                .cloned()
                .collect();
            if bench.is_empty() {
                bail!("manifest `{}` has no bench-split records", manifest.display());
            }

            // Build the method table; model compositors own their stores.
            let mut model_methods: Vec<(String, ModelCompositor)> = Vec::new();
            let mut wants_copy_paste = false;
            let mut wants_oracle = false;
            for m in &methods {
                if m == "copy-paste" {
                    wants_copy_paste = true;
                } else if m == "stylize-oracle" {
                    wants_oracle = true;
                } else if let Some(path) = m.strip_prefix("model=") {
                    let (store, config) = load_model(path)
                        .with_context(|| format!("loading model from `{path}`"))?;
                    let name = Path::new(path)
                        .file_stem()
                        .map(|s| format!("model:{}", s.to_string_lossy()))
                        .unwrap_or_else(|| "model".into());
                    model_methods.push((
                        name,
                        ModelCompositor {
                            store,
                            config,
                            steps,
                            mask_policy: MaskPolicy::Structural,
                        },
                    ));
                } else {
                    bail!("unknown method `{m}`; use copy-paste, stylize-oracle, or model=PATH");
                }
            }

            let by_id: std::collections::BTreeMap<String, maskcomp::data::SampleRecord> =
                bench.iter().map(|r| (r.id.clone(), r.clone())).collect();
            let oracle_base = base.clone();
            let oracle = move |input: &ComposeInput| -> std::result::Result<Image, String> {
                let r = by_id.get(input.sample_id).ok_or("unknown sample id")?;
                let s = maskcomp::data::load_sample(&oracle_base, r).map_err(|e| e.to_string())?;
                Ok(s.i_s)
            };

            let mut table: Vec<(String, CompositorFn)> = Vec::new();
            if wants_copy_paste {
                table.push(("copy-paste".into(), &copy_paste_compositor));
            }
            if wants_oracle {
                table.push(("stylize-oracle".into(), &oracle));
            }
            let closures: Vec<(String, Box<dyn Fn(&ComposeInput) -> std::result::Result<Image, String>>)> =
                model_methods
                    .iter()
                    .map(|(name, mc)| {
                        let f: Box<dyn Fn(&ComposeInput) -> std::result::Result<Image, String>> =
                            Box::new(move |input: &ComposeInput| mc.compose(input));
                        (name.clone(), f)
                    })
                    .collect();
            for (name, f) in &closures {
                table.push((name.clone(), f.as_ref()));
            }

            let cfg = EvalConfig {
                sample_steps: steps,
                seed,
                ..EvalConfig::default()
            };
            let emb = EvalEmbedders::default();
            let report = run_benchmark(&base, &bench, &table, &cfg, &emb)?;
            std::fs::create_dir_all(&out)?;
            let report_path = if format == "text" {
                let p = out.join("report.txt");
                std::fs::write(&p, report.text_table())?;
                p
            } else {
                let p = out.join("report.jsonl");
                std::fs::write(&p, report.to_jsonl())?;
                p
            };
            let mut resolved = KvConfig::new();
            resolved.set("manifest", manifest.display());
            resolved.set("methods", methods.join(","));
            resolved.set("format", format);
            resolved.set("steps", steps);
            resolved.set("seed", seed);
            resolved.set("pixel_threshold", cfg.pixel_threshold);
            resolved.set("gate_fraction", cfg.gate_fraction);
            resolved.write_resolved(&out, "evaluate")?;
            print!("{}", report.text_table());
            println!("report -> {}", report_path.display());
            Ok(())
        }

        Command::Ablate { variant, out } => {
            let v = Variant::parse(&variant)
                .with_context(|| format!("unknown variant `{variant}`"))?;
            std::fs::create_dir_all(&out)?;
            let mut kv = KvConfig::new();
            kv.set("stage", 3);
            kv.set("variant", v.name());
            kv.set("mask_policy", format!("{:?}", v.stage3_mask()).to_lowercase());
            kv.set("needs_ckpt1", v.uses_stage1());
            kv.set("needs_ckpt2", v.uses_stage2());
            kv.set(
                "trainable",
                v.stage3_spec().trainable.join(","),
            );
            kv.set("steps", 800);
            kv.set("lr", 3e-3);
            kv.set("batch", 1);
            kv.set("accumulation", 2);
            let path = out.join(format!("{}.txt", v.name()));
            std::fs::write(&path, kv.render())?;
            let mut resolved = KvConfig::new();
            resolved.set("variant", v.name());
            resolved.write_resolved(&out, "ablate")?;
            println!("variant config -> {}", path.display());
            Ok(())
        }
    }
}
