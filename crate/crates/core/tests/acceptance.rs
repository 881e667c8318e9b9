//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured quantities. Run with
//! `cargo test -p surfuse-core --test acceptance`.

use std::sync::Mutex;
use std::time::Instant;

use surfuse_core::bench::{bench_inference, BenchScope};
use surfuse_core::data::{stratified_split, synth_generate, Preprocess, SynthSpec};
use surfuse_core::eval::evaluate;
use surfuse_core::features::{extract_features, FeatureNormalizer, FEATURE_DIM};
use surfuse_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use surfuse_core::model::{
    composed_model_gradcheck, predict, tiny_configs, ConvStage, Mode, SurformerModel,
    TactileBranchConfig, VisionBranchConfig,
};
use surfuse_core::rng::rng_from;
use surfuse_core::tensor::gradcheck::check_all_primitives;
use surfuse_core::tensor::tape::two_way_softmax;
use surfuse_core::tensor::{Tape, Tensor};
use surfuse_core::train::{
    composite_loss, fit, make_param_groups, plateau_step, Adam, SchedulerConfig, SchedulerState,
    TrainConfig,
};

use rand::Rng;

/// Heavy or timing-sensitive criteria take this lock so they never compete
/// for the two-core budget at the same time.
static HEAVY: Mutex<()> = Mutex::new(());

fn lock_heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_01_gradient_suite() {
    let _guard = lock_heavy();
    let started = Instant::now();

    let checks = check_all_primitives(7, 10).expect("primitive suite runs");
    assert!(checks.len() >= 17);
    let mut worst_primitive: f64 = 0.0;
    for c in &checks {
        assert!(
            c.max_rel_err < 1e-4,
            "primitive {} rel err {} exceeds 1e-4",
            c.name,
            c.max_rel_err
        );
        worst_primitive = worst_primitive.max(c.max_rel_err);
    }

    let composed = composed_model_gradcheck(7, 10).expect("composed check runs");
    assert!(composed < 1e-3, "composed rel err {composed} exceeds 1e-3");

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s (budget 60s)");
    println!(
        "ACCEPTANCE 1 PASS: gradient suite — worst primitive {worst_primitive:.3e} (< 1e-4), \
         composed {composed:.3e} (< 1e-3), {elapsed:.1}s (< 60s)"
    );
}

#[test]
fn criterion_02_fusion_algebra() {
    let mut rng = rng_from(2, "acceptance-fusion");

    // exact unity of the softmax-normalized pair
    for _ in 0..10_000 {
        let a: f64 = rng.gen_range(-12.0..12.0);
        let b: f64 = rng.gen_range(-12.0..12.0);
        let (av, at) = two_way_softmax(a, b);
        assert_eq!(av + at, 1.0);
        assert!(av > 0.0 && av < 1.0);
    }

    // linearity in (z_v, z_t) for fixed weights
    let fuse = |zv: &Tensor<f64>, zt: &Tensor<f64>, w: &Tensor<f64>| -> Vec<f64> {
        let mut tape = Tape::new();
        let a = tape.leaf(zv);
        let b = tape.leaf(zt);
        let wid = tape.leaf(w);
        let f = tape.weighted_fuse(a, b, wid).unwrap();
        tape.value(f).data().to_vec()
    };
    for _ in 0..200 {
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::<f64>::rand_uniform(rng, vec![2, 5], -4.0, 4.0)
        };
        let (a, b, c, d) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let w = Tensor::<f64>::rand_uniform(&mut rng, vec![2], -2.0, 2.0);
        let mut ab = a.clone();
        for (x, y) in ab.data_mut().iter_mut().zip(b.data()) {
            *x += *y;
        }
        let mut cd = c.clone();
        for (x, y) in cd.data_mut().iter_mut().zip(d.data()) {
            *x += *y;
        }
        let lhs = fuse(&ab, &cd, &w);
        let f_ac = fuse(&a, &c, &w);
        let f_bd = fuse(&b, &d, &w);
        for ((l, x), y) in lhs.iter().zip(&f_ac).zip(&f_bd) {
            assert!((l - (x + y)).abs() < 1e-9, "linearity violated: {l} vs {}", x + y);
        }
    }

    // argmax shift invariance over 1e4 random logit vectors
    for _ in 0..10_000 {
        let vals: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let shift: f64 = rng.gen_range(-100.0..100.0);
        let base = predict(&Tensor::new(vec![1, 5], vals.clone()).unwrap()).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let moved = predict(&Tensor::new(vec![1, 5], shifted).unwrap()).unwrap();
        assert_eq!(base.classes, moved.classes);
    }

    // w = (0, 0) averages exactly
    for _ in 0..200 {
        let zv = Tensor::<f64>::rand_uniform(&mut rng, vec![3, 4], -6.0, 6.0);
        let zt = Tensor::<f64>::rand_uniform(&mut rng, vec![3, 4], -6.0, 6.0);
        let w = Tensor::<f64>::zeros(vec![2]);
        let fused = fuse(&zv, &zt, &w);
        for ((f, a), b) in fused.iter().zip(zv.data()).zip(zt.data()) {
            assert_eq!(*f, 0.5 * a + 0.5 * b);
            assert_eq!(*f, 0.5 * (a + b));
        }
    }

    println!(
        "ACCEPTANCE 2 PASS: fusion algebra — α sums exactly 1, linearity < 1e-9, \
         argmax shift-invariant on 10^4 vectors, (0,0) weights average exactly"
    );
}

#[test]
fn criterion_03_loss_identity() {
    fn run<S: surfuse_core::tensor::Scalar>(tol: f64, label: &str) -> f64 {
        let mut rng = rng_from(3, "acceptance-loss");
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let (b, c) = (8, 5);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                Tensor::<S>::rand_uniform(rng, vec![b, c], -4.0, 4.0)
            };
            let (zf, zv, zt) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let mut tape = Tape::new();
            let f = tape.leaf(&zf);
            let v = tape.leaf(&zv);
            let t = tape.leaf(&zt);
            let loss = composite_loss(&mut tape, f, v, t, &targets, 0.3).unwrap();
            let total = tape.value(loss.total).data()[0].as_f64();
            let main = tape.value(loss.main).data()[0].as_f64();
            let av = tape.value(loss.aux_vision).data()[0].as_f64();
            let at = tape.value(loss.aux_tactile).data()[0].as_f64();
            let err = (total - (main + 0.3 * av + 0.3 * at)).abs();
            worst = worst.max(err);
            assert!(err < tol, "{label}: identity error {err} exceeds {tol}");
        }
        worst
    }
    let w32 = run::<f32>(1e-6, "f32");
    let w64 = run::<f64>(1e-12, "f64");
    println!(
        "ACCEPTANCE 3 PASS: loss identity over 10^3 batches — worst {w32:.2e} (f32, < 1e-6), \
         {w64:.2e} (f64, < 1e-12)"
    );
}

#[test]
fn criterion_04_scheduler() {
    let cfg = SchedulerConfig::default();
    assert_eq!((cfg.patience, cfg.factor), (5, 0.5));
    let mut state = SchedulerState::new([1e-3, 1.5e-4, 5e-7]);
    let mut reductions = 0;
    for _ in 0..7 {
        let next = plateau_step(&state, 0.5, &cfg);
        if next.lrs[0] < state.lrs[0] {
            reductions += 1;
        }
        state = next;
    }
    assert_eq!(reductions, 1, "exactly one halving over seven flat epochs");
    assert_eq!(state.lrs, [5e-4, 7.5e-5, 2.5e-7]);

    // rates never fall below the floor
    let tight = SchedulerConfig {
        patience: 1,
        factor: 0.5,
        min_lr: 1e-6,
    };
    let mut state = SchedulerState::new([4e-6, 4e-6, 4e-6]);
    for _ in 0..100 {
        let next = plateau_step(&state, 0.0, &tight);
        for (a, b) in next.lrs.iter().zip(state.lrs) {
            assert!(*a <= b, "lr increased");
            assert!(*a >= tight.min_lr, "lr fell below the floor");
        }
        state = next;
    }
    assert_eq!(state.lrs, [1e-6, 1e-6, 1e-6]);
    println!(
        "ACCEPTANCE 4 PASS: plateau scheduler — one halving after 7 flat epochs \
         (patience 5, factor 0.5), floor respected"
    );
}

#[test]
fn criterion_05_freeze_policy_thirty_tensors() {
    let _guard = lock_heavy();
    // a 30-tensor backbone: 14 norm-free 1x1 stages (28) + norm-free projection (2)
    let vision = VisionBranchConfig {
        input_hw: 8,
        in_channels: 3,
        stages: (0..14)
            .map(|_| ConvStage {
                out_channels: 8,
                kernel: 1,
                stride: 1,
                norm: false,
            })
            .collect(),
        feature_dim: 16,
        projection_norm: false,
        head_hidden: 8,
        dropout: 0.1,
        n_unfrozen_tensors: 20,
        n_classes: 3,
    };
    let tactile = TactileBranchConfig {
        d_model: 8,
        heads: 2,
        d_ffn: 32,
        dropout: 0.1,
        head_hidden: 4,
        n_classes: 3,
    };
    let mut model = SurformerModel::<f64>::new(vision, tactile, 40).unwrap();
    let backbone = model.backbone_param_ids();
    assert_eq!(backbone.len(), 30);

    let outcome = model.apply_freeze_policy(20);
    assert!(!outcome.clamped);
    let before = model.store.snapshot();

    let groups = make_param_groups(&model).unwrap();
    let mut adam = Adam::new();
    let mut rng = rng_from(41, "freeze-probe");
    let images = Tensor::<f64>::rand_uniform(&mut rng, vec![8, 3, 8, 8], -1.0, 1.0);
    let feats = Tensor::<f64>::rand_uniform(&mut rng, vec![8, FEATURE_DIM], -1.0, 1.0);
    let targets: Vec<usize> = (0..8).map(|_| rng.gen_range(0..3)).collect();
    let mut dropout_rng = rng_from(42, "freeze-dropout");
    for _ in 0..100 {
        model.store.zero_grads();
        let mut tape = Tape::new();
        let out = {
            let mut mode = Mode::Train(&mut dropout_rng);
            model.forward(&mut tape, &images, &feats, &mut mode).unwrap()
        };
        let loss = composite_loss(&mut tape, out.fused, out.vision, out.tactile, &targets, 0.3)
            .unwrap();
        tape.backward(loss.total).unwrap();
        tape.accumulate_param_grads(&mut model.store);
        adam.step(&mut model.store, &groups, [1e-3, 1e-3, 1e-3]);
    }

    let after = model.store.snapshot();
    // frozen prefix: bit-identical
    for (i, id) in backbone.iter().enumerate().take(10) {
        assert_eq!(
            before[id.index()],
            after[id.index()],
            "frozen backbone tensor {i} changed"
        );
    }
    // unfrozen suffix and every head/fusion tensor: at least one element moved
    let mut updated = 0;
    for (i, id) in backbone.iter().enumerate().skip(10) {
        assert_ne!(
            before[id.index()],
            after[id.index()],
            "unfrozen backbone tensor {i} received no update"
        );
        updated += 1;
    }
    assert_eq!(updated, 20);
    // heads and fusion must all move. Encoder Q/K projections are excluded:
    // single-token attention has constant softmax weights, so their gradient
    // is structurally zero regardless of the freeze policy.
    let head_or_fusion = model
        .vision_param_ids()
        .into_iter()
        .skip(30)
        .chain(
            model
                .tactile_param_ids()
                .into_iter()
                .filter(|&id| model.store.get(id).name.contains("head")),
        )
        .chain([model.fusion_param_id()]);
    for id in head_or_fusion {
        assert_ne!(
            before[id.index()],
            after[id.index()],
            "trainable tensor {:?} received no update",
            model.store.get(id).name
        );
    }
    // Q/K stay put for the architectural reason above, while the value/output
    // path and feed-forward do learn.
    for name in ["tactile.encoder.mha.q.weight", "tactile.encoder.mha.k.weight"] {
        let id = model.store.by_name(name).unwrap();
        assert_eq!(before[id.index()], after[id.index()]);
    }
    for name in [
        "tactile.encoder.mha.v.weight",
        "tactile.encoder.mha.o.weight",
        "tactile.encoder.ffn.fc1.weight",
        "tactile.embed.weight",
    ] {
        let id = model.store.by_name(name).unwrap();
        assert_ne!(before[id.index()], after[id.index()], "{name} did not learn");
    }
    println!(
        "ACCEPTANCE 5 PASS: freeze policy — on a 30-tensor backbone with n_unfrozen=20, \
         tensors 1-10 bit-identical and tensors 11-30 plus all head/fusion tensors updated \
         after 100 steps"
    );
}

/// Per-branch test accuracies via the public forward/predict path.
fn branch_test_accuracies(
    model: &SurformerModel<f32>,
    test: &surfuse_core::data::DatasetManifest,
    normalizer: &FeatureNormalizer,
    pp: &Preprocess,
) -> (f64, f64, f64) {
    let hw = model.vision_cfg.input_hw;
    let mut correct = [0usize; 3];
    let n = test.samples.len();
    for chunk in test.samples.chunks(32) {
        let b = chunk.len();
        let img_len = 3 * hw * hw;
        let mut images = vec![0f32; b * img_len];
        let mut feats = vec![0f32; b * FEATURE_DIM];
        let mut targets = Vec::with_capacity(b);
        for (row, s) in chunk.iter().enumerate() {
            let img = surfuse_core::data::preprocess_image::<f32>(&s.vision.load().unwrap(), pp);
            images[row * img_len..(row + 1) * img_len].copy_from_slice(img.data());
            let raw = extract_features(&s.tactile.load().unwrap().to_gray().unwrap()).unwrap();
            let z = normalizer.normalize(&raw);
            for (j, v) in z.0.iter().enumerate() {
                feats[row * FEATURE_DIM + j] = *v as f32;
            }
            targets.push(s.label);
        }
        let images = Tensor::new(vec![b, 3, hw, hw], images).unwrap();
        let feats = Tensor::new(vec![b, FEATURE_DIM], feats).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward(&mut tape, &images, &feats, &mut Mode::Eval)
            .unwrap();
        for (slot, id) in [(0, out.fused), (1, out.vision), (2, out.tactile)] {
            let pred = predict(tape.value(id)).unwrap();
            correct[slot] += pred
                .classes
                .iter()
                .zip(&targets)
                .filter(|(p, t)| p == t)
                .count();
        }
    }
    (
        correct[0] as f64 / n as f64,
        correct[1] as f64 / n as f64,
        correct[2] as f64 / n as f64,
    )
}

#[test]
fn criterion_06_desk_scale_end_to_end() {
    let _guard = lock_heavy();
    let started = Instant::now();

    let manifest = synth_generate(&SynthSpec::new(5, 200, 7)).unwrap();
    let (train_set, test_set) = stratified_split(&manifest, 0.8, 7).unwrap();
    assert_eq!(train_set.samples.len(), 800);
    assert_eq!(test_set.samples.len(), 200);

    // documented desk-scale override: the backbone trains from scratch, so
    // the vision rate rises from the published 5e-7 to 1e-3
    let cfg = TrainConfig {
        lr_vision: 1e-3,
        max_epochs: 6,
        seed: 7,
        ..TrainConfig::default()
    };
    let pp = Preprocess::default();
    let mut model = SurformerModel::<f32>::new(
        VisionBranchConfig::new(5),
        TactileBranchConfig::new(5),
        cfg.seed,
    )
    .unwrap();
    let result = fit(&mut model, &train_set, &cfg, &pp).unwrap();

    let (fused, vision, tactile) =
        branch_test_accuracies(&model, &test_set, &result.normalizer, &pp);
    assert!(
        fused >= 0.90,
        "fused test accuracy {fused} below the 0.90 gate"
    );
    assert!(
        fused >= vision.max(tactile) - 0.02,
        "fused {fused} trails best single branch {} by more than 0.02",
        vision.max(tactile)
    );

    // seed determinism: an identical-seed prefix run reproduces the first
    // epochs of the log exactly
    let prefix_cfg = TrainConfig {
        max_epochs: 2,
        ..cfg.clone()
    };
    let mut probe = SurformerModel::<f32>::new(
        VisionBranchConfig::new(5),
        TactileBranchConfig::new(5),
        cfg.seed,
    )
    .unwrap();
    let prefix = fit(&mut probe, &train_set, &prefix_cfg, &pp).unwrap();
    assert_eq!(
        prefix.log.epochs[..2],
        result.log.epochs[..2],
        "same-seed runs must produce identical epoch records"
    );

    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < 600.0,
        "desk-scale run took {elapsed:.0}s (budget 600s)"
    );
    println!(
        "ACCEPTANCE 6 PASS: desk-scale end-to-end — test accuracy fused {fused:.3} \
         (≥ 0.90), vision {vision:.3}, tactile {tactile:.3}, fused ≥ max−0.02, \
         seed-deterministic, {elapsed:.0}s (< 600s)"
    );
}

#[test]
fn criterion_07_modality_informativeness() {
    let _guard = lock_heavy();

    // fusion weights barely move at the published 5e-7 within a desk-scale
    // budget, so the demonstration raises the fusion rate; thresholds were
    // pinned after the first calibration run (α ≈ 0.97 / 0.98)
    let cfg = TrainConfig {
        lr_vision: 1e-3,
        lr_fusion: 5e-2,
        max_epochs: 8,
        seed: 7,
        ..TrainConfig::default()
    };
    let pp = Preprocess::default();

    let run = |spec: SynthSpec| -> (f64, f64) {
        let manifest = synth_generate(&spec).unwrap();
        let (train_set, _) = stratified_split(&manifest, 0.8, 7).unwrap();
        let mut model = SurformerModel::<f32>::new(
            VisionBranchConfig::new(5),
            TactileBranchConfig::new(5),
            cfg.seed,
        )
        .unwrap();
        fit(&mut model, &train_set, &cfg, &pp).unwrap();
        model.alpha()
    };

    let mut noisy_tactile = SynthSpec::new(5, 60, 7);
    noisy_tactile.tactile_noise = true;
    let (alpha_v, _) = run(noisy_tactile);
    assert!(
        alpha_v > 0.6,
        "α_vision {alpha_v} did not exceed 0.6 with noise tactile input"
    );

    let mut noisy_vision = SynthSpec::new(5, 60, 7);
    noisy_vision.vision_noise = true;
    let (_, alpha_t) = run(noisy_vision);
    assert!(
        alpha_t > 0.6,
        "α_tactile {alpha_t} did not exceed 0.6 with noise vision input"
    );

    println!(
        "ACCEPTANCE 7 PASS: modality informativeness — α_vision {alpha_v:.3} > 0.6 under \
         tactile noise, α_tactile {alpha_t:.3} > 0.6 under vision noise"
    );
}

#[test]
fn criterion_08_metrics_oracle_equivalence() {
    use surfuse_core::metrics::{confusion, prf1, roc_auc};

    let mut rng = rng_from(8, "acceptance-metrics");
    for _ in 0..1000 {
        let c = rng.gen_range(2..6);
        let n = rng.gen_range(10..50);
        let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let y_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();

        // brute-force confusion counter
        let mut want = vec![0u64; c * c];
        for (&t, &p) in y_true.iter().zip(&y_pred) {
            want[t * c + p] += 1;
        }
        let cm = confusion(&y_true, &y_pred, c).unwrap();
        assert_eq!(cm.counts, want);

        // brute-force precision/recall/F1
        let report = prf1(&cm);
        for class in 0..c {
            let tp = want[class * c + class] as f64;
            let col: f64 = (0..c).map(|t| want[t * c + class] as f64).sum();
            let row: f64 = (0..c).map(|p| want[class * c + p] as f64).sum();
            let precision = if col > 0.0 { tp / col } else { 0.0 };
            let recall = if row > 0.0 { tp / row } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            assert_eq!(report.per_class[class].precision, precision);
            assert_eq!(report.per_class[class].recall, recall);
            assert_eq!(report.per_class[class].f1, f1);
        }

        // probability rows; trapezoid AUC vs pair counting
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            })
            .collect();
        let roc = roc_auc(&scores, &y_true, c).unwrap();
        for (class, curve) in roc.per_class.iter().enumerate() {
            let Some(curve) = curve else { continue };
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                if y_true[i] != class {
                    continue;
                }
                for j in 0..n {
                    if y_true[j] == class {
                        continue;
                    }
                    pairs += 1.0;
                    if scores[i][class] > scores[j][class] {
                        wins += 1.0;
                    } else if scores[i][class] == scores[j][class] {
                        wins += 0.5;
                    }
                }
            }
            let mann_whitney = wins / pairs;
            assert!(
                (curve.auc - mann_whitney).abs() < 1e-9,
                "trapezoid {} vs pair-count {mann_whitney}",
                curve.auc
            );
        }
    }

    // the worked confusion case: 12 of 200 true class-2 samples predicted
    // as class 0 → recall(class 2) = 188/200 = 0.94
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for class in 0..5usize {
        for i in 0..200usize {
            y_true.push(class);
            y_pred.push(if class == 2 && i < 12 { 0 } else { class });
        }
    }
    let cm = confusion(&y_true, &y_pred, 5).unwrap();
    assert_eq!(cm.at(2, 0), 12);
    let report = prf1(&cm);
    assert!((report.per_class[2].recall - 0.94).abs() < 1e-12);

    println!(
        "ACCEPTANCE 8 PASS: metrics oracles — 10^3 random instances match brute-force \
         counters exactly, trapezoid AUC = pair-count AUC within 1e-9, \
         12-of-200 worked case gives recall 0.94"
    );
}

#[test]
fn criterion_09_parameter_accounting() {
    let model = SurformerModel::<f32>::new(
        VisionBranchConfig::new(5),
        TactileBranchConfig::new(5),
        0,
    )
    .unwrap();
    let counts = model.count_parameters();

    // analytic closed form for the default tactile branch
    let (d, ffn, hid, c) = (64usize, 256usize, 32usize, 5usize);
    let analytic = (FEATURE_DIM * d + d)      // embedding
        + 2 * d                               // encoder ln1
        + 4 * (d * d + d)                     // q/k/v/o projections
        + 2 * d                               // encoder ln2
        + (d * ffn + ffn) + (ffn * d + d)     // feed-forward pair
        + 2 * d                               // head layer norm
        + (d * hid + hid) + (hid * c + c); // head mlp
    assert_eq!(counts.tactile_total, analytic);
    assert_eq!(counts.tactile_total, 52_869, "pinned regression constant");

    // the 1280→256 head layer contributes exactly 327,936 parameters
    let fc1 = model.store.by_name("vision.head.fc1.weight").unwrap();
    let fc1b = model.store.by_name("vision.head.fc1.bias").unwrap();
    let head_layer =
        model.store.get(fc1).tensor.numel() + model.store.get(fc1b).tensor.numel();
    assert_eq!(head_layer, 327_936);

    assert_eq!(counts.fusion_total, 2);
    assert_eq!(
        counts.grand_total,
        counts.vision_total + counts.tactile_total + counts.fusion_total
    );
    println!(
        "ACCEPTANCE 9 PASS: parameter accounting — tactile branch {} (= analytic sum, \
         pinned 52,869), 1280→256 layer = 327,936, grand total {}",
        counts.tactile_total, counts.grand_total
    );
}

#[test]
fn criterion_10_latency_schema_and_ordering() {
    let _guard = lock_heavy();

    let model = SurformerModel::<f32>::new(
        VisionBranchConfig::new(5),
        TactileBranchConfig::new(5),
        10,
    )
    .unwrap();
    let manifest = synth_generate(&SynthSpec::new(2, 10, 3)).unwrap();
    let samples: Vec<_> = manifest
        .samples
        .iter()
        .take(8)
        .map(|s| (s.vision.load().unwrap(), s.tactile.load().unwrap()))
        .collect();
    let grays: Vec<_> = samples
        .iter()
        .map(|(_, t)| t.to_gray().unwrap())
        .collect();
    let normalizer = FeatureNormalizer::fit(&grays, 1000, 3).unwrap();
    let pp = Preprocess::default();

    let model_only = bench_inference(
        &model,
        &normalizer,
        &pp,
        &samples,
        5,
        30,
        BenchScope::ModelOnly,
    )
    .unwrap();
    let full = bench_inference(
        &model,
        &normalizer,
        &pp,
        &samples,
        5,
        30,
        BenchScope::FullPipeline,
    )
    .unwrap();

    for report in [&model_only, &full] {
        assert_eq!(report.timed_iters, 30);
        for stats in [
            &report.total,
            &report.vision_branch,
            &report.tactile_branch,
            &report.fuse_and_predict,
        ] {
            assert!(stats.min_ms > 0.0);
            assert!(stats.min_ms <= stats.median_ms && stats.median_ms <= stats.p95_ms);
        }
        // the 7-feature transformer is far cheaper than the 224×224 stack
        assert!(
            report.tactile_branch.median_ms < report.vision_branch.median_ms,
            "tactile {} not below vision {}",
            report.tactile_branch.median_ms,
            report.vision_branch.median_ms
        );
    }
    // feature extraction and preprocessing make the full pipeline strictly slower
    assert!(
        full.total.median_ms > model_only.total.median_ms,
        "full {} not above model-only {}",
        full.total.median_ms,
        model_only.total.median_ms
    );
    assert!(full.tactile_branch.median_ms > model_only.tactile_branch.median_ms);

    println!(
        "ACCEPTANCE 10 PASS: latency — model-only median {:.2} ms < full-pipeline median \
         {:.2} ms; tactile branch ({:.3} ms) < vision branch ({:.2} ms); schema valid in \
         both scopes",
        model_only.total.median_ms,
        full.total.median_ms,
        full.tactile_branch.median_ms,
        full.vision_branch.median_ms
    );
}

#[test]
fn criterion_11_checkpoint_roundtrip() {
    let _guard = lock_heavy();
    let dir = tempfile::tempdir().unwrap();

    // small real training so the checkpoint carries non-trivial state
    let manifest = synth_generate(&SynthSpec::new(3, 12, 5)).unwrap();
    let (train_set, test_set) = stratified_split(&manifest, 0.8, 5).unwrap();
    let (mut vcfg, tcfg) = tiny_configs(3);
    vcfg.input_hw = 32;
    vcfg.stages = vec![
        ConvStage {
            out_channels: 8,
            kernel: 3,
            stride: 2,
            norm: true,
        },
        ConvStage {
            out_channels: 16,
            kernel: 3,
            stride: 2,
            norm: true,
        },
    ];
    vcfg.feature_dim = 32;
    let pp = Preprocess {
        size: 32,
        ..Preprocess::default()
    };
    let cfg = TrainConfig {
        lr_vision: 1e-3,
        max_epochs: 2,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut model = SurformerModel::<f32>::new(vcfg, tcfg, 5).unwrap();
    let result = fit(&mut model, &train_set, &cfg, &pp).unwrap();

    let report_before = evaluate(&model, &test_set, &result.normalizer, &pp, 16).unwrap();
    let bytes_before = serde_json::to_vec(&report_before).unwrap();

    let p1 = dir.path().join("a.ckpt");
    save_checkpoint(
        &p1,
        &model,
        &result.normalizer,
        &pp,
        &manifest.classes,
        cfg.seed,
    )
    .unwrap();
    let loaded = load_checkpoint::<f32>(&p1).unwrap();
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(
        &p2,
        &loaded.model,
        &loaded.normalizer,
        &loaded.preprocess,
        &loaded.classes,
        loaded.train_seed,
    )
    .unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "save → load → save must reproduce the checkpoint bytes"
    );

    let report_after = evaluate(
        &loaded.model,
        &test_set,
        &loaded.normalizer,
        &loaded.preprocess,
        16,
    )
    .unwrap();
    let bytes_after = serde_json::to_vec(&report_after).unwrap();
    assert_eq!(
        bytes_before, bytes_after,
        "evaluation replay after checkpoint load must be byte-identical"
    );

    println!(
        "ACCEPTANCE 11 PASS: checkpoint round-trip — save/load/save bytes identical, \
         evaluation replay byte-identical ({} samples, accuracy {:.3})",
        report_after.n_samples, report_after.prf.accuracy
    );
}
