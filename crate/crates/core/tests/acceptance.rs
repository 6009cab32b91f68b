//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use malaria_core::data::{
    augment_sample, expand_training_set, generate_cells, min_max_rescale, read_patch, resample, sample_params,
    standardize, stain_normalize, stain_normalize_unclipped, write_png, AugmentPolicy, ImagePatch, StainReference,
    StandardizeStats, SynthTask,
};
use malaria_core::eval::{
    basic_metrics, confusion, ensemble_predict, mcc, patient_diagnose, roc_auc, tta_predict, MetricsReport,
    PredictionRecord, ProbPair,
};
use malaria_core::gradcheck::{default_cases, run_suite, GRADCHECK_TOLERANCE};
use malaria_core::harness::{
    kfold_plan, load_manifest, run_holdout, run_single, split_80_10_10, AugmentMode, CellDataset, CvMode,
    ExperimentConfig, LoadedModel, Manifest, ManifestRow, ModelPreset, Normalization, Preprocessor, RunResult,
};
use malaria_core::layers::LayerKind;
use malaria_core::model::{build_custom_net, build_vgg_baseline};
use malaria_core::svm::{rbf_kernel, smo_train, FeatureMatrix, SvmParams, DEFAULT_GAMMA};
use malaria_core::train::{
    emit_training_curves, load_checkpoint, save_checkpoint, train_epoch, AdadeltaState, Checkpoint, TensorDataset,
    TrainConfig, TrainingLog,
};
use malaria_core::{FreezeSpec, Label, LayerSpec, RngStream, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn one_core<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool").install(f)
}

fn balanced(n: usize) -> Vec<Label> {
    (0..n).map(|i| if i % 2 == 0 { Label::Parasitized } else { Label::Uninfected }).collect()
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let report = run_suite(&default_cases(), 100, 2024);
    let secs = t.elapsed().as_secs_f64();
    for kind in ["conv2d", "maxpool2d", "relu", "dense", "softmax_bce", "frozen_passthrough"] {
        ensure(report.cases.iter().any(|c| c.name == kind), || format!("no gradient case for {kind}"))?;
    }
    let worst = report.cases.iter().map(|c| c.worst).fold(0.0, f64::max);
    ensure(report.passed(), || format!("failing cases {:?}", report.failures()))?;
    ensure(worst < GRADCHECK_TOLERANCE && GRADCHECK_TOLERANCE <= 1e-3, || format!("worst {worst:e}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} kinds x 100 instances, worst rel err {worst:.2e}, {secs:.1} s", report.cases.len()))
}

fn c2_shapes() -> Outcome {
    let t = Instant::now();
    let init = RngStream::new(0, 1);
    let custom = build_custom_net(200, &init).map_err(e2s)?;
    let top = custom.topology();
    ensure(custom.layers().len() == 19, || format!("custom net has {} layers", custom.layers().len()))?;
    let counts = [
        (LayerKind::Conv2d, 8),
        (LayerKind::MaxPool2d, 4),
        (LayerKind::Dense, 3),
        (LayerKind::Flatten, 1),
        (LayerKind::Dropout, 2),
    ];
    for (k, n) in counts {
        ensure(top.count(k) == n, || format!("custom net has {} {k:?} layers", top.count(k)))?;
    }
    let flat = top.flatten_width().map_err(e2s)?;
    ensure(flat == Some(36864), || format!("flatten width {flat:?}"))?;

    let vgg = build_vgg_baseline(200, &init).map_err(e2s)?;
    let convs = vgg.topology().count(LayerKind::Conv2d);
    ensure(convs == 13, || format!("baseline has {convs} conv layers"))?;
    let specs: Vec<&LayerSpec> = vgg.layers().iter().map(|l| &l.spec).collect();
    let head = &specs[specs.len() - 5..];
    let ok = matches!(head[0], LayerSpec::Flatten)
        && matches!(head[1], LayerSpec::Dense { outputs: 1024, relu: true, .. })
        && matches!(head[2], LayerSpec::Dropout { rate } if *rate == 0.5)
        && matches!(head[3], LayerSpec::Dense { outputs: 2, relu: false, .. })
        && matches!(head[4], LayerSpec::Softmax);
    ensure(ok, || format!("baseline head is {head:?}"))?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("construction took {secs:.2} s"))?;
    Ok(format!("19 layers / flatten 36864; 13 convs + 1024-dropout-2-softmax head; {secs:.2} s"))
}

fn c3_freeze() -> Outcome {
    let mut net = build_vgg_baseline(32, &RngStream::new(3, 1)).map_err(e2s)?;
    net.set_trainable(FreezeSpec::Range(1, 16)).map_err(e2s)?;
    let before: Vec<(bool, Vec<f32>)> = net.params().iter().map(|p| (p.trainable, p.value.data().to_vec())).collect();
    let frozen = before.iter().filter(|(t, _)| !t).count();
    ensure(frozen > 0, || "nothing frozen".into())?;
    let mut s = RngStream::new(3, 2);
    let x = Tensor::uniform(&[20, 3, 32, 32], 0.0, 1.0, &mut s).map_err(e2s)?;
    let data = TensorDataset::new(x, balanced(20)).map_err(e2s)?;
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 1,
        ..TrainConfig::baseline()
    };
    let mut state = AdadeltaState::zeros_like(&net).map_err(e2s)?;
    train_epoch(&mut net, &data, &cfg, &mut state, 0).map_err(e2s)?;
    let mut changed = 0;
    for (p, (trainable, old)) in net.params().iter().zip(&before) {
        let same = p.value.data().iter().zip(old).all(|(a, b)| a.to_bits() == b.to_bits());
        if !trainable {
            ensure(same, || format!("frozen parameter {} moved", p.name))?;
        } else if !same {
            changed += 1;
        }
    }
    let head_changed = net.params().iter().zip(&before).any(|(p, (t, old))| {
        *t && p.name.starts_with("fc") && p.value.data().iter().zip(old).any(|(a, b)| a.to_bits() != b.to_bits())
    });
    ensure(head_changed, || "no head parameter changed".into())?;
    Ok(format!("10 steps: {frozen} frozen tensors bit-identical, {changed} trainable tensors updated"))
}

/// The desk-scale task A run shared by criteria 4 and 5.
fn task_a_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ModelPreset::CustomScaled, 32);
    cfg.normalization = Normalization::Standardize;
    cfg.train.batch_size = 32;
    cfg.train.epochs = 30;
    cfg
}

fn desk_splits() -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    ((0..500).collect(), (500..600).collect(), (600..700).collect())
}

/// First epoch whose validation accuracy is within 0.01 of the best, and
/// whether train accuracy rises above its value there afterwards.
fn plateau_then_rise(log: &TrainingLog) -> Option<(usize, f64, f64)> {
    let best = log.rows.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    let k = log.rows.iter().position(|r| r.val_acc >= best - 0.01)?;
    let later = log.rows[k + 1..].iter().map(|r| r.train_acc).fold(f64::NEG_INFINITY, f64::max);
    (later > log.rows[k].train_acc).then_some((log.rows[k].epoch, log.rows[k].train_acc, later))
}

fn c4_learning(shared: &mut Option<Checkpoint>) -> Outcome {
    let data = CellDataset::from_patches(generate_cells(SynthTask::A, 700, 32, 11).map_err(e2s)?, 32).map_err(e2s)?;
    let (tr, va, te) = desk_splits();
    let cfg = task_a_config();
    let t = Instant::now();
    let run = one_core(|| run_single(&cfg, &data, &tr, &va, &te, None)).map_err(e2s)?;
    let secs = t.elapsed().as_secs_f64();
    let acc = run.test.as_ref().map(|r| r.accuracy).unwrap_or(0.0);
    let dir = tempfile::tempdir().map_err(e2s)?;
    let files = emit_training_curves(&run.trained.log, dir.path()).map_err(e2s)?;
    let emitted = TrainingLog::from_csv(&std::fs::read_to_string(&files.table_csv).map_err(e2s)?).map_err(e2s)?;
    ensure(files.accuracy_svg.is_file() && files.loss_svg.is_file(), || "curves not written".into())?;
    *shared = Some(run.trained.checkpoint.clone());
    ensure(emitted.rows.len() <= 30, || format!("{} epochs", emitted.rows.len()))?;
    ensure(acc >= 0.98, || format!("test accuracy {acc:.3}"))?;
    ensure(secs < 300.0, || format!("took {secs:.0} s on one core"))?;
    let (epoch, at, later) =
        plateau_then_rise(&emitted).ok_or_else(|| "no validation plateau followed by rising train accuracy".to_string())?;
    Ok(format!(
        "test acc {acc:.3} in {secs:.0} s on one core; val plateaus at epoch {epoch} while train acc rises {at:.3} -> {later:.3}"
    ))
}

fn c5_transfer(pretrained: Option<&Checkpoint>) -> Outcome {
    let pre = pretrained.ok_or_else(|| "task A pretraining unavailable".to_string())?;
    let b = CellDataset::from_patches(generate_cells(SynthTask::B, 700, 32, 12).map_err(e2s)?, 32).map_err(e2s)?;
    let (tr, va, te) = desk_splits();
    let mut ft = task_a_config();
    ft.freeze = "L1-L12".into();
    ft.seed = 5;
    let acc = |r: &RunResult| r.test.as_ref().map(|m| m.accuracy).unwrap_or(0.0);
    let transfer = run_single(&ft, &b, &tr, &va, &te, Some(pre)).map_err(e2s)?;
    let control = run_single(&ft, &b, &tr, &va, &te, None).map_err(e2s)?;
    let (t, c) = (acc(&transfer), acc(&control));
    ensure(t >= 0.90, || format!("transfer accuracy {t:.3}"))?;
    ensure(t > c, || format!("transfer {t:.3} not above control {c:.3}"))?;
    Ok(format!("task B test acc {t:.3} with the task A conv base frozen vs {c:.3} for a frozen random base"))
}

fn brute_force(labels: &[bool], p: &[f64]) -> [f64; 6] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&y, &s) in labels.iter().zip(p) {
        match (y, s >= 0.5) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let prec = div(tp, tp + fp);
    let rec = div(tp, tp + fn_);
    let f1 = div(2.0 * tp, 2.0 * tp + fp + fn_);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let m = div(tp * tn - fp * fn_, den);
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                pairs += 1.0;
                wins += if p[i] > p[j] {
                    1.0
                } else if p[i] == p[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    [(tp + tn) / labels.len() as f64, prec, rec, f1, m, div(wins, pairs)]
}

fn c6_metrics() -> Outcome {
    let mut s = RngStream::new(6, 0);
    let mut worst: f64 = 0.0;
    let mut aucs = 0;
    for _ in 0..10_000 {
        let n = 2 + s.below(60);
        let levels = 1 + s.below(20);
        let labels: Vec<bool> = (0..n).map(|_| s.bernoulli(0.5)).collect();
        let p: Vec<f64> = (0..n).map(|_| s.below(levels + 1) as f64 / levels as f64).collect();
        let recs: Vec<PredictionRecord> = labels
            .iter()
            .zip(&p)
            .enumerate()
            .map(|(i, (&y, &q))| PredictionRecord::new(i, if y { Label::Parasitized } else { Label::Uninfected }, q))
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        let cm = confusion(&recs).map_err(e2s)?;
        let b = basic_metrics(&cm).map_err(e2s)?;
        let want = brute_force(&labels, &p);
        let got = [b.accuracy, b.precision, b.recall, b.f1, mcc(&cm)];
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
        if labels.iter().any(|&y| y) && labels.iter().any(|&y| !y) {
            worst = worst.max((roc_auc(&recs).map_err(e2s)? - want[5]).abs());
            aucs += 1;
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    // Confusion counts of the best model: FN 34, FP 29 over 2756 test cells.
    let (pos, neg) = (1378usize, 1378usize);
    let mut recs = Vec::new();
    for i in 0..pos {
        recs.push(PredictionRecord::new(i, Label::Parasitized, if i < 34 { 0.1 } else { 0.9 }).map_err(e2s)?);
    }
    for i in 0..neg {
        recs.push(PredictionRecord::new(pos + i, Label::Uninfected, if i < 29 { 0.9 } else { 0.1 }).map_err(e2s)?);
    }
    let r = MetricsReport::from_predictions(&recs, None).map_err(e2s)?;
    ensure(r.n == 2756 && r.confusion.fn_ == 34 && r.confusion.fp == 29, || format!("{:?}", r.confusion))?;
    ensure((r.accuracy - 0.97714).abs() <= 1e-5, || format!("accuracy {}", r.accuracy))?;
    Ok(format!(
        "10^4 sets ({aucs} with AUC), max deviation {worst:.1e}; FN 34 / FP 29 / n 2756 -> accuracy {:.5}",
        r.accuracy
    ))
}

/// Projects `v` onto `{0 <= a <= c, y.a = 0}` by bisection on the multiplier.
fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |lam: f64| -> Vec<f64> { v.iter().zip(y).map(|(vi, yi)| (vi - lam * yi).clamp(0.0, c)).collect() };
    let g = |a: &[f64]| a.iter().zip(y).map(|(a, y)| a * y).sum::<f64>();
    let bound = v.iter().map(|x| x.abs()).fold(0.0, f64::max) + c + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Accelerated projected gradient ascent on the SVM dual.
fn qp_oracle(x: &FeatureMatrix, gamma: f64, c: f64) -> Vec<f64> {
    let n = x.len();
    let y: Vec<f64> = x.labels().iter().map(|&l| l as f64).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            q[i * n + j] = y[i] * y[j] * rbf_kernel(x.row(i), x.row(j), gamma).unwrap();
        }
    }
    let lip = (0..n).map(|i| q[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut a = vec![0.0; n];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..30_000 {
        let grad: Vec<f64> = (0..n).map(|i| 1.0 - (0..n).map(|j| q[i * n + j] * z[j]).sum::<f64>()).collect();
        let step: Vec<f64> = z.iter().zip(&grad).map(|(zi, g)| zi + g / lip).collect();
        let next = project(&step, &y, c);
        let t2 = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = next.iter().zip(&a).map(|(n, o)| n + (t - 1.0) / t2 * (n - o)).collect();
        a = next;
        t = t2;
    }
    a
}

fn oracle_objective(x: &FeatureMatrix, a: &[f64], gamma: f64) -> f64 {
    let mut quad = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            let yy = (x.labels()[i] * x.labels()[j]) as f64;
            quad += a[i] * a[j] * yy * rbf_kernel(x.row(i), x.row(j), gamma).unwrap();
        }
    }
    a.iter().sum::<f64>() - 0.5 * quad
}

fn blobs(n: usize, seed: u64) -> FeatureMatrix {
    let mut s = RngStream::new(seed, 7);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y: i8 = if i % 2 == 0 { 1 } else { -1 };
        for _ in 0..2 {
            data.push((y as f64 * 1.0 + 1.3 * s.standard_normal()) as f32);
        }
        labels.push(y);
    }
    FeatureMatrix::new(2, data, labels).unwrap()
}

fn c7_svm() -> Outcome {
    let params = SvmParams::default();
    ensure(DEFAULT_GAMMA == 0.1 && params.gamma == 0.1, || format!("gamma {}", params.gamma))?;
    let train = blobs(50, 1);
    let held = blobs(200, 2);
    let sol = smo_train(&train, &params).map_err(e2s)?;
    let oracle = qp_oracle(&train, params.gamma, params.c);
    let (smo_obj, qp_obj) = (sol.dual_objective(&train), oracle_objective(&train, &oracle, params.gamma));
    ensure((smo_obj - qp_obj).abs() <= 1e-3, || format!("dual {smo_obj} vs oracle {qp_obj}"))?;
    let kkt = sol.kkt_residual(&train).map_err(e2s)?;
    ensure(kkt <= 1e-3, || format!("KKT residual {kkt:e}"))?;

    let y: Vec<f64> = train.labels().iter().map(|&l| l as f64).collect();
    let f = |a: &[f64], v: &[f32]| -> f64 {
        (0..train.len()).map(|j| a[j] * y[j] * rbf_kernel(train.row(j), v, params.gamma).unwrap()).sum()
    };
    let free: Vec<usize> = (0..train.len()).filter(|&i| oracle[i] > 1e-6 && oracle[i] < params.c - 1e-6).collect();
    ensure(!free.is_empty(), || "oracle has no free support vectors".into())?;
    let bias = free.iter().map(|&i| y[i] - f(&oracle, train.row(i))).sum::<f64>() / free.len() as f64;
    let mut agree = 0;
    for i in 0..held.len() {
        let (smo_sign, _) = sol.model.predict(held.row(i)).map_err(e2s)?;
        let qp_sign = if f(&oracle, held.row(i)) + bias >= 0.0 { 1 } else { -1 };
        agree += usize::from(smo_sign == qp_sign);
    }
    let rate = agree as f64 / held.len() as f64;
    ensure(rate >= 0.99, || format!("agreement {rate:.3}"))?;
    Ok(format!(
        "dual {smo_obj:.6} vs oracle {qp_obj:.6}, KKT residual {kkt:.1e}, agreement {agree}/200, gamma 0.1"
    ))
}

fn within(v: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&v)
}

fn c8_augmentation() -> Outcome {
    let policy = AugmentPolicy::default();
    let root = RngStream::new(8, 0);
    for i in 0..10_000u64 {
        let p = sample_params(&policy, &mut root.derive(i));
        let ok = within(p.contrast, 0.5, 1.5)
            && p.crop.iter().all(|&c| within(c, 0.0, 0.2))
            && within(p.rotate_degrees, -25.0, 25.0)
            && within(p.translate.0, -0.2, 0.2)
            && within(p.translate.1, -0.2, 0.2)
            && within(p.shear_degrees, -25.0, 25.0)
            && within(p.noise_sigma, 0.0, 0.05 * 255.0)
            && policy.contains(&p);
        ensure(ok, || format!("draw {i} out of range: {p:?}"))?;
    }
    let rows: Vec<ManifestRow> = balanced(27_558)
        .into_iter()
        .enumerate()
        .map(|(i, label)| ManifestRow {
            path: PathBuf::from(format!("{i}.png")),
            label,
            patient_id: "p".into(),
        })
        .collect();
    let expanded = expand_training_set(&rows, 4, &policy, 8).map_err(e2s)?;
    let pos = expanded.iter().filter(|r| r.label.is_positive()).count();
    ensure(expanded.len() == 137_790, || format!("{} rows", expanded.len()))?;
    ensure(pos * 2 == expanded.len(), || format!("{pos} positives"))?;
    let patch = &generate_cells(SynthTask::A, 1, 32, 8).map_err(e2s)?[0];
    let same = augment_sample(patch, &AugmentPolicy::identity(), &mut root.derive(99)).map_err(e2s)?;
    ensure(same.pixels == patch.pixels, || "identity policy changed pixels".into())?;
    Ok("10^4 draws inside the policy ranges; 27,558 -> 137,790 rows, 68,895 per class; identity is a no-op".into())
}

fn rgb_means(px: &[f64]) -> [f64; 3] {
    let n = (px.len() / 3) as f64;
    std::array::from_fn(|c| px.iter().skip(c).step_by(3).sum::<f64>() / n)
}

fn c9_preprocessing() -> Outcome {
    let x = Tensor::from_vec(&[1, 3, 1, 1], vec![0.0, 128.0, 255.0]).map_err(e2s)?;
    let r = min_max_rescale(&x).map_err(e2s)?;
    let want = [0.0f32, (128.0f64 / 255.0) as f32, 1.0];
    ensure(r.data() == want, || format!("rescaled to {:?}", r.data()))?;
    ensure((r.data()[1] as f64 - 0.50196).abs() < 1e-5, || format!("{}", r.data()[1]))?;

    let mut s = RngStream::new(9, 0);
    let t = Tensor::uniform(&[8, 3, 16, 16], 0.0, 255.0, &mut s).map_err(e2s)?;
    let z = standardize(&t, &StandardizeStats::fit(&t).map_err(e2s)?).map_err(e2s)?;
    let hw = 16 * 16;
    let mut worst: f64 = 0.0;
    for c in 0..3 {
        let vals: Vec<f64> = (0..8).flat_map(|n| z.data()[(n * 3 + c) * hw..(n * 3 + c + 1) * hw].to_vec()).map(f64::from).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        worst = worst.max(m.abs()).max((sd - 1.0).abs());
    }
    ensure(worst < 1e-5, || format!("standardized moments off by {worst:e}"))?;

    let a = &generate_cells(SynthTask::A, 1, 32, 9).map_err(e2s)?[0];
    let b = &generate_cells(SynthTask::B, 1, 32, 10).map_err(e2s)?[0];
    ensure(a.pixels != b.pixels, || "patches are identical".into())?;
    let reference = StainReference::from_patch(a);
    let raw = stain_normalize_unclipped(b, &reference).map_err(e2s)?;
    let target = rgb_means(&a.pixels.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let got = rgb_means(&raw);
    let dmean = (0..3).map(|c| (got[c] - target[c]).abs()).fold(0.0, f64::max);
    ensure(dmean < 1e-3, || format!("channel means differ by {dmean}"))?;
    let once = stain_normalize(b, &reference).map_err(e2s)?;
    let twice = stain_normalize(&once, &reference).map_err(e2s)?;
    let drift = once.pixels.iter().zip(&twice.pixels).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
    ensure(drift <= 1.0, || format!("second pass moved a pixel by {drift}/255"))?;
    Ok(format!(
        "{{0,128,255}} -> {:?}; standardized moments within {worst:.1e}; stain means within {dmean:.1e}, re-apply drift {:.3}/255",
        r.data(),
        drift
    ))
}

fn c10_splits() -> Outcome {
    let labels = balanced(27_558);
    let plan = split_80_10_10(&labels, 10).map_err(e2s)?;
    ensure(plan.sizes() == (22_046, 2_756, 2_756), || format!("sizes {:?}", plan.sizes()))?;
    plan.check_partition(labels.len()).map_err(e2s)?;
    for part in [&plan.train, &plan.val, &plan.test] {
        let pos = part.iter().filter(|&&i| labels[i].is_positive()).count() as f64;
        ensure((pos - part.len() as f64 / 2.0).abs() <= 1.0, || format!("{pos} positives of {}", part.len()))?;
    }
    ensure(split_80_10_10(&labels, 10).map_err(e2s)? == plan, || "split changed on rerun".into())?;
    let cv = kfold_plan(&labels, 5, 10, CvMode::HeldOutTenths).map_err(e2s)?;
    ensure(cv.folds.len() == 5, || format!("{} folds", cv.folds.len()))?;
    for (i, f) in cv.folds.iter().enumerate() {
        ensure(f.train.len() == 24_802 && f.val.len() == 2_756, || {
            format!("fold {i}: {}/{}", f.train.len(), f.val.len())
        })?;
        let mut seen = vec![false; labels.len()];
        for &j in f.train.iter().chain(&f.val) {
            ensure(!seen[j], || format!("fold {i} repeats sample {j}"))?;
            seen[j] = true;
        }
        ensure(seen.iter().all(|&s| s), || format!("fold {i} misses samples"))?;
    }
    let mut all: Vec<usize> = cv.parts.iter().flatten().copied().collect();
    all.sort_unstable();
    ensure(all == (0..labels.len()).collect::<Vec<_>>(), || "parts do not partition the pool".into())?;
    ensure(kfold_plan(&labels, 5, 10, CvMode::HeldOutTenths).map_err(e2s)? == cv, || "folds changed on rerun".into())?;
    Ok("27,558 -> 22,046 / 2,756 / 2,756 stratified; 5 folds of 24,802 / 2,756; disjoint, exhaustive, reproducible".into())
}

fn c11_combination() -> Outcome {
    let mut s = RngStream::new(11, 0);
    let member = |s: &mut RngStream| -> Vec<ProbPair> {
        (0..100)
            .map(|_| {
                let p = s.next_f64();
                [1.0 - p, p]
            })
            .collect()
    };
    let m1 = member(&mut s);
    let (m2, m3) = (member(&mut s), member(&mut s));
    let same = ensemble_predict(&[m1.clone(), m1.clone(), m1.clone()], Some(&[0.3, 1.7, 2.9])).map_err(e2s)?;
    ensure(same == m1, || "consensus of equal members moved".into())?;
    let pick = ensemble_predict(&[m1.clone(), m2.clone(), m3.clone()], Some(&[1.0, 0.0, 0.0])).map_err(e2s)?;
    ensure(pick == m1, || "weights (1,0,0) did not select member 1".into())?;
    let w = [0.2, 0.5, 0.3];
    let base = ensemble_predict(&[m1.clone(), m2.clone(), m3.clone()], Some(&w)).map_err(e2s)?;
    let mut scale_dev: f64 = 0.0;
    for k in [4.0, 0.125, 3.7, 1e6] {
        let ws: Vec<f64> = w.iter().map(|v| v * k).collect();
        let out = ensemble_predict(&[m1.clone(), m2.clone(), m3.clone()], Some(&ws)).map_err(e2s)?;
        for (a, b) in base.iter().zip(&out) {
            scale_dev = scale_dev.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
            ensure((a[1] >= 0.5) == (b[1] >= 0.5), || format!("label flipped under scale {k}"))?;
        }
    }
    ensure(scale_dev <= 1e-12, || format!("rescaling moved outputs by {scale_dev:e}"))?;

    let cfg = ExperimentConfig::new(ModelPreset::CustomScaled, 32);
    let net = malaria_core::harness::build_model(&cfg).map_err(e2s)?;
    let patches = generate_cells(SynthTask::A, 40, 32, 11).map_err(e2s)?;
    let prep = Preprocessor {
        stain: None,
        normalization: Normalization::None,
        stats: None,
    };
    let prepare = |p: &[ImagePatch]| prep.apply(p);
    let batch = 16;
    let tta = tta_predict(&net, &patches, 4, &AugmentPolicy::identity(), &RngStream::new(1, 2), &prepare, batch)
        .map_err(e2s)?;
    let mut plain = Vec::new();
    for chunk in patches.chunks(batch) {
        let out = net.predict(&prepare(chunk).map_err(e2s)?).map_err(e2s)?;
        plain.extend(out.data().chunks(2).map(|p| [p[0] as f64, p[1] as f64]));
    }
    ensure(tta == plain, || "identity TTA differs from plain prediction".into())?;

    let mut preds = Vec::new();
    let mut patient_of = HashMap::new();
    let mut truth: BTreeMap<String, (bool, bool, usize)> = BTreeMap::new();
    let mut id = 0;
    for p in 0..50 {
        let name = format!("P{p:03}");
        let sick = s.bernoulli(0.5);
        for _ in 0..1 + s.below(12) {
            let label = if sick && s.bernoulli(0.4) { Label::Parasitized } else { Label::Uninfected };
            let q = s.next_f64();
            preds.push(PredictionRecord::new(id, label, q).map_err(e2s)?);
            patient_of.insert(id, name.clone());
            let e = truth.entry(name.clone()).or_insert((false, false, 0));
            e.0 |= label.is_positive();
            e.1 |= q >= 0.5;
            e.2 += 1;
            id += 1;
        }
    }
    let report = patient_diagnose(&preds, &patient_of).map_err(e2s)?;
    ensure(report.patients.len() == truth.len(), || format!("{} patients", report.patients.len()))?;
    for (r, (name, (t, p, n))) in report.patients.iter().zip(&truth) {
        let ok = &r.patient == name && r.truth.is_positive() == *t && r.predicted.is_positive() == *p && r.cells == *n;
        ensure(ok, || format!("patient {name} disagrees with the grouped oracle"))?;
    }
    let hits = truth.values().filter(|(t, p, _)| t == p).count() as f64 / truth.len() as f64;
    ensure(report.accuracy == hits, || format!("patient accuracy {} vs {hits}", report.accuracy))?;
    Ok(format!(
        "consensus fixed, (1,0,0) exact, rescaling within {scale_dev:.0e}, identity TTA exact, 50-patient OR rule matches"
    ))
}

/// Images -> resampled patches -> manifest -> training -> evaluation, all
/// under `root`. Returns the artifact paths to compare.
fn pipeline(root: &Path) -> Result<Vec<PathBuf>, String> {
    let raw = root.join("raw");
    let cells = generate_cells(SynthTask::A, 120, 40, 21).map_err(e2s)?;
    let mut rows = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let name = format!("{}_cell_{i:04}.png", c.patient_id);
        let src = raw.join(c.label.token()).join(&name);
        std::fs::create_dir_all(src.parent().unwrap()).map_err(e2s)?;
        write_png(c, &src).map_err(e2s)?;
        let patch = resample(&read_patch(&src, c.label).map_err(e2s)?, 32).map_err(e2s)?;
        let rel = PathBuf::from("patches").join(c.label.token()).join(&name);
        std::fs::create_dir_all(root.join(&rel).parent().unwrap()).map_err(e2s)?;
        write_png(&patch, &root.join(&rel)).map_err(e2s)?;
        rows.push(ManifestRow {
            path: rel,
            label: c.label,
            patient_id: c.patient_id.clone(),
        });
    }
    Manifest::new(root, rows).save(&root.join("manifest.csv")).map_err(e2s)?;
    let manifest = load_manifest(&root.join("manifest.csv")).map_err(e2s)?;
    let data = CellDataset::load_manifest(&manifest, 32).map_err(e2s)?;
    let plan = split_80_10_10(&data.labels(), 21).map_err(e2s)?;
    let mut cfg = ExperimentConfig::new(ModelPreset::CustomScaled, 32);
    cfg.seed = 21;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    cfg.stain_normalize = true;
    cfg.normalization = Normalization::Standardize;
    cfg.augment = AugmentMode::Online;
    let run = run_single(&cfg, &data, &plan.train, &plan.val, &plan.test, None).map_err(e2s)?;
    let ckpt = root.join("checkpoint.psgt");
    save_checkpoint(&ckpt, &run.trained.checkpoint).map_err(e2s)?;
    let curves = emit_training_curves(&run.trained.log, root).map_err(e2s)?;
    let model = LoadedModel::from_checkpoint(&load_checkpoint(&ckpt).map_err(e2s)?).map_err(e2s)?;
    let report = model.report(&data, &plan.test, 16).map_err(e2s)?;
    let text = root.join("metrics_test.txt");
    std::fs::write(&text, report.to_text()).map_err(e2s)?;
    Ok(vec![ckpt, curves.table_csv, curves.accuracy_svg, curves.loss_svg, text])
}

fn c12_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(e2s)?;
    let b = tempfile::tempdir().map_err(e2s)?;
    let fa = one_core(|| pipeline(a.path()))?;
    let fb = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .map_err(e2s)?
        .install(|| pipeline(b.path()))?;
    for (x, y) in fa.iter().zip(&fb) {
        let (bx, by) = (std::fs::read(x).map_err(e2s)?, std::fs::read(y).map_err(e2s)?);
        ensure(bx == by, || format!("{} differs", x.file_name().unwrap().to_string_lossy()))?;
    }
    Ok(format!("{} artifacts byte-identical across runs on 1 and 3 threads", fa.len()))
}

/// Walks `<dir>/{Parasitized,Uninfected}` (any case) into a manifest.
fn nih_manifest(dir: &Path) -> Result<Manifest, String> {
    let mut rows = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(e2s)? {
        let entry = entry.map_err(e2s)?;
        let Some(label) = Label::parse(&entry.file_name().to_string_lossy()) else { continue };
        let mut files: Vec<PathBuf> = std::fs::read_dir(entry.path())
            .map_err(e2s)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            let patient = name.split_once('_').map_or("unknown", |(p, _)| p).to_string();
            rows.push(ManifestRow {
                path: f,
                label,
                patient_id: patient,
            });
        }
    }
    ensure(!rows.is_empty(), || format!("no images under {}", dir.display()))?;
    rows.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest::new(dir, rows))
}

fn c13_extended(dir: &Path) -> Outcome {
    let manifest = nih_manifest(dir)?;
    let data = CellDataset::from_manifest(manifest, 200);
    let mut cfg = ExperimentConfig::new(ModelPreset::VggBaseline, 200);
    cfg.freeze = "L1-L16".into();
    let backbone = std::env::var_os("MALARIA_VGG_WEIGHTS")
        .map(|p| load_checkpoint(Path::new(&p)))
        .transpose()
        .map_err(e2s)?;
    let plan = split_80_10_10(&data.labels(), cfg.seed).map_err(e2s)?;
    let run = run_single(&cfg, &data, &plan.train, &plan.val, &plan.test, backbone.as_ref()).map_err(e2s)?;
    let acc = run.test.map(|r| r.accuracy).unwrap_or(0.0);
    ensure(acc >= 0.95, || format!("test accuracy {acc:.4}"))?;
    let hold = run_holdout(&cfg, &data, 5, false).map_err(e2s)?;
    ensure((hold.accuracy.mean - 0.97).abs() <= 0.02, || format!("holdout {}", hold.accuracy.display()))?;
    Ok(format!("test accuracy {acc:.4}; holdout {}", hold.accuracy.display()))
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, out: Outcome| {
        match &out {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail})"),
            Err(why) => {
                println!("criterion {n:>2} {name}: FAIL ({why})");
                failed.push(n);
            }
        }
    };
    let mut pretrained = None;
    report(1, "gradient correctness", c1_gradients());
    report(2, "architecture shapes", c2_shapes());
    report(3, "freeze contract", c3_freeze());
    report(4, "desk-scale learning", c4_learning(&mut pretrained));
    report(5, "transfer learning", c5_transfer(pretrained.as_ref()));
    report(6, "metric oracles", c6_metrics());
    report(7, "svm correctness", c7_svm());
    report(8, "augmentation contract", c8_augmentation());
    report(9, "preprocessing contracts", c9_preprocessing());
    report(10, "split and fold properties", c10_splits());
    report(11, "ensemble and tta invariants", c11_combination());
    report(12, "determinism", c12_determinism());
    match std::env::var_os("MALARIA_NIH_DIR") {
        Some(dir) => report(13, "nih extended run", c13_extended(Path::new(&dir))),
        None => println!("criterion 13 nih extended run: SKIP (set MALARIA_NIH_DIR to the cell_images folder)"),
    }
    if !failed.is_empty() {
        println!("acceptance: {} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all gating criteria passed");
}
