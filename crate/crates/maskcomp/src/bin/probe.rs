use maskcomp::compose::{compose_image, ComposeOptions};
use maskcomp::data::load_sample;
use maskcomp::data::synth::{build_dataset, GenConfig};
use maskcomp::eval::*;
use maskcomp::model::{MaskPolicy, ModelConfig};
use maskcomp::rng::derive_seed;
use maskcomp::train::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let s12: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(400);
    let s3: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(800);
    let lr: f64 = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(3e-3);
    let n_bench: usize = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(30);
    let euler_steps: usize = args.get(5).and_then(|v| v.parse().ok()).unwrap_or(10);

    let dir = std::env::temp_dir().join("maskcomp-probe2");
    let _ = std::fs::remove_dir_all(&dir);
    let gen = GenConfig {
        count: 260,
        seed: 1,
        corruption_rate: 0.0,
        train_frac: 0.75,
        val_frac: 0.05,
        ..GenConfig::default()
    };
    let records = build_dataset(&gen, &dir).unwrap();
    let all_train: Vec<_> = records.iter().filter(|r| r.split == "train").collect();
    let (val_recs, train_recs) = all_train.split_at(10.min(all_train.len() / 5));
    let (val_recs, train_recs) = (val_recs.to_vec(), train_recs.to_vec());
    let bench_recs: Vec<_> = records
        .iter()
        .filter(|r| r.split == "bench")
        .take(n_bench)
        .cloned()
        .collect();
    eprintln!(
        "dataset: {} train / {} val / {} bench",
        train_recs.len(),
        val_recs.len(),
        bench_recs.len()
    );

    let d: usize = args.get(6).and_then(|v| v.parse().ok()).unwrap_or(32);
    let model = ModelConfig { d_model: d, ..ModelConfig::default() };
    let cfg12 = TrainConfig {
        model,
        steps: s12,
        lr,
        batch: 1,
        accumulation: 2,
        seed: 7,
        hash_check_every: 0,
    };
    let base = shared_base::<f32>(&model, cfg12.seed);

    // Stage 1.
    let t0 = Instant::now();
    let s1_train: Vec<ConditionedSample<f32>> = train_recs
        .iter()
        .map(|r| stage1_sample(&model, &load_sample(&dir, r).unwrap()).unwrap())
        .collect();
    let s1_hold: Vec<ConditionedSample<f32>> = val_recs
        .iter()
        .map(|r| stage1_sample(&model, &load_sample(&dir, r).unwrap()).unwrap())
        .collect();
    let run1 = run_stage1(&base, &cfg12, &s1_train, &s1_hold).unwrap();
    eprintln!(
        "stage1 {:.0}s: holdout {:.4} -> {:.4} ({:.3})",
        t0.elapsed().as_secs_f64(),
        run1.holdout_initial,
        run1.holdout_final,
        run1.holdout_final / run1.holdout_initial
    );

    // Stage 2.
    let t0 = Instant::now();
    let mk_s2 = |recs: &[&maskcomp::data::SampleRecord]| -> Vec<ConditionedSample<f32>> {
        recs.iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let s = load_sample(&dir, r).unwrap();
                let mask = stage2_token_mask(model.grid(), derive_seed(33, &[i as u64]));
                stage2_sample(&model, &s.i_s, &mask, &r.id).unwrap()
            })
            .collect()
    };
    let s2_train = mk_s2(&train_recs);
    let s2_hold = mk_s2(&val_recs);
    let run2 = run_stage2(&base, &cfg12, &s2_train, &s2_hold).unwrap();
    eprintln!(
        "stage2 {:.0}s: holdout {:.4} -> {:.4} ({:.3})",
        t0.elapsed().as_secs_f64(),
        run2.holdout_initial,
        run2.holdout_final,
        run2.holdout_final / run2.holdout_initial
    );

    // Stage 3 (full, with mask).
    let cfg3 = TrainConfig {
        steps: s3,
        ..cfg12.clone()
    };
    let c1 = to_checkpoint_with_meta(&run1.store, &model, 1);
    let c2 = to_checkpoint_with_meta(&run2.store, &model, 2);
    let s3_train: Vec<ConditionedSample<f32>> = train_recs
        .iter()
        .map(|r| stage3_sample(&model, &load_sample(&dir, r).unwrap()).unwrap())
        .collect();
    let s3_hold: Vec<ConditionedSample<f32>> = val_recs
        .iter()
        .map(|r| stage3_sample(&model, &load_sample(&dir, r).unwrap()).unwrap())
        .collect();

    let t0 = Instant::now();
    let assembled = assemble_stage3::<f32>(&c1, &c2, &model, 7).unwrap();
    let run3 = run_stage3(assembled, &cfg3, MaskPolicy::Structural, &s3_train, &s3_hold).unwrap();
    eprintln!(
        "stage3 {:.0}s: holdout {:.4} -> {:.4} ({:.3})",
        t0.elapsed().as_secs_f64(),
        run3.holdout_initial,
        run3.holdout_final,
        run3.holdout_final / run3.holdout_initial
    );
    let hist = &run3.state.loss_history;
    for chunk in hist.chunks(hist.len() / 8 + 1) {
        let avg: f64 = chunk.iter().map(|x| x.1).sum::<f64>() / chunk.len() as f64;
        eprint!(" {avg:.3}");
    }
    eprintln!();

    // Benchmark: model vs copy-paste.
    let t0 = Instant::now();
    let emb = EvalEmbedders::default();
    let eval_cfg = EvalConfig {
        sample_steps: euler_steps,
        ..EvalConfig::default()
    };
    let store3 = run3.store;
    let model_fn = |input: &ComposeInput| -> std::result::Result<maskcomp::data::Image, String> {
        compose_image(
            &store3,
            &model,
            input.reference,
            input.background,
            input.mask,
            &ComposeOptions {
                steps: euler_steps,
                seed: input.seed,
                mask_policy: MaskPolicy::Structural,
                paste_back: true,
            },
        )
        .map_err(|e| e.to_string())
    };
    let methods: Vec<(String, CompositorFn)> = vec![
        ("copy-paste".into(), &copy_paste_compositor),
        ("model-full".into(), &model_fn),
    ];
    let report = run_benchmark(&dir, &bench_recs, &methods, &eval_cfg, &emb).unwrap();
    eprintln!("eval {:.0}s", t0.elapsed().as_secs_f64());
    println!("{}", report.text_table());

    // Dump a few outputs for eyeballing.
    let dump = std::path::Path::new("/tmp/probe-dump");
    let _ = std::fs::create_dir_all(dump);
    for r in bench_recs.iter().take(4) {
        let s = load_sample(&dir, r).unwrap();
        let input = ComposeInput {
            sample_id: &r.id,
            reference: &s.i_f,
            background: &s.i_bs,
            mask: &s.i_m,
            seed: 1,
        };
        let out = model_fn(&input).unwrap();
        let cp = copy_paste_compositor(&input).unwrap();
        s.i_f.save_png(dump.join(format!("{}_ref.png", r.id))).unwrap();
        s.i_bs.save_png(dump.join(format!("{}_bg.png", r.id))).unwrap();
        s.i_s.save_png(dump.join(format!("{}_gt.png", r.id))).unwrap();
        out.save_png(dump.join(format!("{}_model.png", r.id))).unwrap();
        cp.save_png(dump.join(format!("{}_paste.png", r.id))).unwrap();
    }
    eprintln!("dumped to {}", dump.display());
}
