//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
//!
//! Run with `cargo test -p metaage --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use metaage::data::format::{decode as decode_mafv, encode as encode_mafv};
use metaage::data::{compute_oracle, split, synth_generate, Dataset, SynthConfig, SynthOracle};
use metaage::losses::{ord_loss, LossConfig, TargetMode};
use metaage::mathcore::{grad_check, Matrix, Mode};
use metaage::metalearner::generate_weights;
use metaage::metrics::{cs, cs_curve, eps_error, mae, retrieve, slice_agreement, weight_embedding, EvalResult};
use metaage::training::checkpoint::{decode as decode_mapc, encode as encode_mapc};
use metaage::training::{
    evaluate, lambda_delta_sweep, predict, step, train, train_baseline_concat, AdamState, Batch, BatchInputs, Model,
    ModelKind, TrainConfig, TrainedModel,
};
use metaage::{Dims, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Synthetic benchmark shared by criteria 5-7.
struct Bench {
    train: Dataset,
    test: Dataset,
    oracle: SynthOracle,
    config: TrainConfig,
    metaage: Option<TrainedModel>,
    metaage_mae: Option<f64>,
}

const BENCH_LR: f64 = 1e-2;
const BENCH_BATCH: usize = 32;
const BENCH_EPOCHS: usize = 20;

impl Bench {
    fn new() -> Self {
        let synth = SynthConfig::default();
        let (data, full) = synth_generate(&synth).expect("synth");
        let (train, test) = split(&data, (0.8, 0.2), synth.seed, true).expect("split");
        let oracle = compute_oracle(&test, &full.offsets, &synth).expect("oracle");
        let mut config = TrainConfig {
            dims: Dims::new(synth.classes, synth.age_dim, synth.identity_dim, 128),
            batch_size: BENCH_BATCH,
            epochs: BENCH_EPOCHS,
            seed: 7,
            model_kind: ModelKind::Metaage,
            use_adapter: true,
            ..Default::default()
        };
        config.adam.lr = BENCH_LR;
        Self {
            train,
            test,
            oracle,
            config,
            metaage: None,
            metaage_mae: None,
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let dims = Dims::new(5, 8, 6, 16);
    let loss = LossConfig::default();
    let seeds = 20u64;
    let mut worst = (0.0f64, 0u64, String::new());
    let mut failing = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut model = Model::init(ModelKind::Metaage, dims, true, seed).unwrap();
        // move every parameter off its symmetric initial value
        let params: Vec<f64> = model
            .flat_params()
            .iter()
            .map(|v| v + rng.random_range(-0.1..0.1))
            .collect();
        model.set_flat_params(&params).unwrap();
        let inputs = BatchInputs {
            age: random_matrix(&mut rng, 3, dims.age_dim),
            identity: random_matrix(&mut rng, 3, dims.identity_dim),
        };
        let hard: Vec<usize> = (0..3).map(|_| rng.random_range(0..dims.classes)).collect();
        let batch = Batch {
            inputs,
            labels: hard.iter().map(|&y| y as f64).collect(),
            hard,
            soft: None,
        };
        model.loss_and_grad(&batch, &loss).unwrap();
        let analytic = model.flat_grads();
        let layout = model.layout();
        let base = model.clone();
        let report = grad_check(
            |p| {
                let mut m = base.clone();
                m.set_flat_params(p).unwrap();
                m.batch_loss(&batch, &loss).unwrap()
            },
            &params,
            &analytic,
            1e-4,
            Some(&layout),
        )
        .unwrap();
        let at = layout.name_of(report.worst_index);
        if report.max_rel_err > worst.0 {
            worst = (report.max_rel_err, seed, at.clone());
        }
        if !report.passed() {
            failing.push(format!(
                "seed {seed}: {at} analytic {:.3e} numeric {:.3e}",
                report.analytic_at_worst, report.numeric_at_worst
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failing.is_empty() && secs < 30.0;
    let mut detail = format!(
        "{seeds} seeds, max rel err {:.3e} (seed {}, {}), {secs:.1}s",
        worst.0, worst.1, worst.2
    );
    if !failing.is_empty() {
        detail.push_str(&format!("; failing: {}", failing.join("; ")));
    }
    Outcome::new(pass, detail)
}

fn degeneracy() -> Outcome {
    let dims = Dims::default();
    let mut meta = Model::init(ModelKind::Metaage, dims, false, 3).unwrap();
    let p = meta.metalearner_mut().unwrap();
    p.zero_residual_output();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    p.residual.bn.running_mean = (0..dims.hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.residual.bn.running_var = (0..dims.hidden).map(|_| rng.random_range(0.5..2.0)).collect();
    let global = Model::init(ModelKind::Global, dims, false, 3).unwrap();
    let n = 1000;
    let inputs = BatchInputs {
        age: random_matrix(&mut rng, n, dims.age_dim),
        identity: random_matrix(&mut rng, n, dims.identity_dim),
    };
    let a = meta.predict(&inputs).unwrap();
    let b = global.predict(&inputs).unwrap();
    let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let params = meta.metalearner().unwrap();
    let literal_equal =
        (0..50).all(|i| generate_weights(params, inputs.identity.row(i), Mode::Eval).unwrap().0 == params.common);
    Outcome::new(
        max_diff <= 1e-12 && literal_equal,
        format!("{n} inputs, max |Δ prediction| {max_diff:.3e}, W^p == W^c on 50 literal checks: {literal_equal}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..101) as f64).collect();
        // integer errors land exactly on CS thresholds
        let preds: Vec<f64> = labels
            .iter()
            .map(|y| {
                if rng.random_bool(0.5) {
                    y + rng.random_range(-12i32..=12) as f64
                } else {
                    y + rng.random_range(-12.0..12.0)
                }
            })
            .collect();
        let sigmas: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..8.0)).collect();

        let nf = n as f64;
        let mut abs_sum = 0.0;
        let mut gauss_sum = 0.0;
        for i in 0..n {
            let e = preds[i] - labels[i];
            abs_sum += e.abs();
            gauss_sum += (-(e * e) / (2.0 * sigmas[i] * sigmas[i])).exp();
        }
        worst = worst.max((mae(&preds, &labels).unwrap() - abs_sum / nf).abs());
        worst = worst.max((eps_error(&preds, &labels, &sigmas).unwrap() - (1.0 - gauss_sum / nf)).abs());
        let curve = cs_curve(&preds, &labels, 20).unwrap();
        for &(theta, value) in &curve {
            let mut hits = 0;
            for i in 0..n {
                if (preds[i] - labels[i]).abs() <= theta as f64 {
                    hits += 1;
                }
            }
            let literal = 100.0 * hits as f64 / nf;
            worst = worst.max((value - literal).abs());
            worst = worst.max((cs(&preds, &labels, theta as f64).unwrap() - literal).abs());
        }
        monotone &= curve.windows(2).all(|w| w[0].1 <= w[1].1);
    }
    let exact = eps_error(&[3.0, 40.0, 7.5], &[3.0, 40.0, 7.5], &[1.0, 2.0, 0.7]).unwrap();
    Outcome::new(
        worst <= 1e-12 && monotone && exact == 0.0,
        format!("100 instances, max |Δ| vs literal {worst:.3e}, CS monotone: {monotone}, ε-error(exact) = {exact}"),
    )
}

fn ordinal_characterization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut zero_ok = 0;
    let mut violated_ok = 0;
    for case in 0..100 {
        let k = rng.random_range(2..102);
        let y = rng.random_range(0..k);
        let delta = [0.0, 0.5, 1.0, 2.0, 3.0][case % 5];
        // integer-valued scores so margins of exactly delta stay exact
        let mut s = vec![0.0; k];
        s[y] = rng.random_range(-20i32..20) as f64;
        for i in (0..y).rev() {
            s[i] = s[i + 1] - delta - rng.random_range(0..3) as f64;
        }
        for i in y + 1..k {
            s[i] = s[i - 1] - delta - rng.random_range(0..3) as f64;
        }
        if ord_loss(&s, y, delta).unwrap().loss == 0.0 {
            zero_ok += 1;
        }
        let j = rng.random_range(0..k - 1);
        let gap = rng.random_range(0.25..2.0);
        if j < y {
            s[j] = s[j + 1] - delta + gap;
        } else {
            s[j + 1] = s[j] - delta + gap;
        }
        if ord_loss(&s, y, delta).unwrap().loss > 0.0 {
            violated_ok += 1;
        }
    }
    Outcome::new(
        zero_ok == 100 && violated_ok == 100,
        format!("L_ord = 0 on {zero_ok}/100 unimodal cases, > 0 on {violated_ok}/100 single violations"),
    )
}

fn personalization(bench: &mut Bench) -> Outcome {
    let mut results = Vec::new();
    let mut slowest = 0.0f64;
    for kind in [ModelKind::Metaage, ModelKind::Concat, ModelKind::Global] {
        let start = Instant::now();
        let config = TrainConfig {
            model_kind: kind,
            ..bench.config
        };
        let trained = match kind {
            ModelKind::Concat => train_baseline_concat(&bench.train, &config),
            _ => train(&bench.train, &config),
        }
        .unwrap();
        let m = evaluate(&trained.model, &bench.test).unwrap().mae;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        results.push(m);
        if kind == ModelKind::Metaage {
            bench.metaage = Some(trained);
            bench.metaage_mae = Some(m);
        }
    }
    let (meta, concat, global) = (results[0], results[1], results[2]);
    let o = &bench.oracle;
    let ordered = meta < concat && concat < global;
    let near_personal = meta <= o.bayes_mae_personal + 1.0;
    let above_global = global >= o.bayes_mae_global - 0.5;
    Outcome::new(
        ordered && near_personal && above_global && slowest < 300.0,
        format!(
            "test MAE metaage {meta:.4} < concat {concat:.4} < global {global:.4}: {ordered}; \
             oracle personal {:.4} (+1.0: {near_personal}), oracle global {:.4} (-0.5: {above_global}); \
             slowest model {slowest:.1}s",
            o.bayes_mae_personal, o.bayes_mae_global
        ),
    )
}

fn sweep_direction(bench: &Bench) -> Outcome {
    let rows = lambda_delta_sweep(
        &bench.train,
        &bench.test,
        &bench.config,
        &[0.0, 0.1, 0.2, 0.5],
        &[bench.config.loss.delta],
        1,
    )
    .unwrap();
    let base = rows[0].mae;
    let table: Vec<String> = rows.iter().map(|r| format!("λ={} {:.4}", r.lambda, r.mae)).collect();
    let best = rows[1..].iter().map(|r| r.mae).fold(f64::INFINITY, f64::min);
    let consistent = bench
        .metaage_mae
        .is_none_or(|m| rows.iter().any(|r| r.lambda == bench.config.loss.lambda && r.mae == m));
    Outcome::new(
        best < base && consistent,
        format!(
            "δ={}: {}; best λ>0 {best:.4} vs λ=0 {base:.4}",
            bench.config.loss.delta,
            table.join(", ")
        ),
    )
}

fn retrieval_direction(bench: &Bench) -> Outcome {
    let model = &bench.metaage.as_ref().expect("criterion 5 trains the model").model;
    let params = model.metalearner().unwrap();
    let recs = bench.test.records();
    let embeddings: Vec<Vec<f64>> = recs
        .iter()
        .map(|r| weight_embedding(params, &r.id_feat).unwrap())
        .collect();
    let sign = |i: usize| bench.oracle.offset_of(&recs[i]).unwrap() >= 0.0;
    let (mut top, mut bottom) = (0.0, 0.0);
    for q in 0..recs.len() {
        // other identities only, so a person never retrieves their own samples
        let gallery: Vec<usize> = (0..recs.len())
            .filter(|&i| recs[i].identity_id != recs[q].identity_id)
            .collect();
        let vectors: Vec<&[f64]> = gallery.iter().map(|&i| embeddings[i].as_slice()).collect();
        let result = retrieve(&embeddings[q], &vectors).unwrap();
        let (t, b) = slice_agreement(&result, 10.0, |g| sign(gallery[g]) == sign(q));
        top += t;
        bottom += b;
    }
    let n = recs.len() as f64;
    let (top, bottom) = (100.0 * top / n, 100.0 * bottom / n);
    Outcome::new(
        top - bottom >= 10.0,
        format!(
            "{} queries, same offset sign: top-10% {top:.1}%, bottom-10% {bottom:.1}%, gap {:.1} pp",
            recs.len(),
            top - bottom
        ),
    )
}

fn determinism_and_formats() -> Outcome {
    let synth = SynthConfig {
        n_identities: 12,
        samples_per_identity: 6,
        classes: 21,
        age_dim: 10,
        identity_dim: 6,
        ..Default::default()
    };
    let (data, _) = synth_generate(&synth).unwrap();
    let config = TrainConfig {
        dims: Dims::new(21, 10, 6, 16),
        batch_size: 16,
        epochs: 3,
        seed: 11,
        use_adapter: true,
        ..Default::default()
    };
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let run = || {
        let t = train(&data, &config).unwrap();
        let report = evaluate(&t.model, &data).unwrap();
        (encode_mapc(&t.model).unwrap(), report.to_json())
    };
    let (ckpt_a, json_a) = run();
    let (ckpt_b, json_b) = run();
    checks.push(("checkpoint bytes identical across runs", ckpt_a == ckpt_b));
    checks.push(("report JSON identical across runs", json_a == json_b));
    checks.push(("report JSON parses back", EvalResult::from_json(&json_a).is_ok()));

    let mafv = encode_mafv(&data).unwrap();
    checks.push((
        "MAFV1 round trip",
        encode_mafv(&decode_mafv(&mafv).unwrap()).unwrap() == mafv,
    ));
    checks.push((
        "MAPC round trip",
        encode_mapc(&decode_mapc(&ckpt_a).unwrap()).unwrap() == ckpt_a,
    ));
    let v1 = encode_mapc(&Model::init(ModelKind::Metaage, config.dims, false, 1).unwrap()).unwrap();
    checks.push((
        "MAPC v1 round trip",
        v1[4] == 1 && encode_mapc(&decode_mapc(&v1).unwrap()).unwrap() == v1,
    ));

    let offset_of = |r: Result<Dataset, Error>| match r {
        Err(Error::Format { offset, .. }) => Some(offset),
        _ => None,
    };
    let mut bad = mafv.clone();
    bad[0] = b'X';
    checks.push(("MAFV1 bad magic at 0", offset_of(decode_mafv(&bad)) == Some(0)));
    let rec_len = metaage::data::format::record_len(&data.dims());
    let cut = metaage::data::format::HEADER_LEN + 5 * rec_len + 7;
    checks.push((
        "MAFV1 truncation at incomplete record",
        offset_of(decode_mafv(&mafv[..cut])) == Some((metaage::data::format::HEADER_LEN + 5 * rec_len) as u64),
    ));
    let mut nan = mafv.clone();
    let at = metaage::data::format::HEADER_LEN + 3 * rec_len + 12;
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    checks.push((
        "MAFV1 NaN feature offset",
        offset_of(decode_mafv(&nan)) == Some(at as u64),
    ));
    let mapc_offset = |r: Result<Model, Error>| match r {
        Err(Error::Format { offset, .. }) => Some(offset),
        _ => None,
    };
    checks.push((
        "MAPC truncation",
        mapc_offset(decode_mapc(&ckpt_a[..ckpt_a.len() - 3])).is_some(),
    ));
    let mut bad = ckpt_a.clone();
    bad[4] = 7;
    checks.push(("MAPC bad version at 4", mapc_offset(decode_mapc(&bad)) == Some(4)));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks passed", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn overfit_one_batch() -> Outcome {
    let synth = SynthConfig {
        n_identities: 4,
        samples_per_identity: 2,
        ..Default::default()
    };
    let (data, _) = synth_generate(&synth).unwrap();
    let mut config = TrainConfig {
        dims: Dims::new(synth.classes, synth.age_dim, synth.identity_dim, 128),
        batch_size: 8,
        epochs: 1,
        seed: 9,
        use_adapter: true,
        ..Default::default()
    };
    config.adam.lr = BENCH_LR;
    config.loss.target_mode = TargetMode::HardOnehot;
    let mut model = Model::init(ModelKind::Metaage, config.dims, true, config.seed).unwrap();
    let indices: Vec<usize> = (0..8).collect();
    let batch = Batch::from_dataset(&data, &indices, config.loss.target_mode).unwrap();
    let mut state = AdamState::new(&model.group_sizes());
    for _ in 0..500 {
        step(&mut model, &batch, &config, &mut state).unwrap();
    }
    let labels = &batch.labels;
    let train_mode: Vec<f64> = model
        .scores(&batch.inputs, Mode::Train)
        .unwrap()
        .iter_rows()
        .map(|s| metaage::estimator::age_distribution(s).unwrap().expected_age)
        .collect();
    let train_mae = mae(&train_mode, labels).unwrap();
    let eval_mae = mae(&predict(&model, &data).unwrap(), &data.labels()).unwrap();
    Outcome::new(
        train_mae < 0.5,
        format!("500 steps on 8 samples: training MAE {train_mae:.4} (eval-mode {eval_mae:.4})"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut bench = Bench::new();
    let mut all_pass = true;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        all_pass &= outcome.pass;
        println!(
            "criterion {id} [{name}]: {} - {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    };
    report(1, "gradient correctness", gradient_check());
    report(2, "degeneracy", degeneracy());
    report(3, "metric oracles", metric_oracles());
    report(4, "ordinal loss", ordinal_characterization());
    let personal = personalization(&mut bench);
    report(5, "synthetic personalization", personal);
    report(6, "sweep direction", sweep_direction(&bench));
    report(7, "retrieval direction", retrieval_direction(&bench));
    report(8, "determinism and formats", determinism_and_formats());
    report(9, "overfit capacity", overfit_one_batch());
    println!("acceptance finished in {:.1}s", start.elapsed().as_secs_f64());
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
