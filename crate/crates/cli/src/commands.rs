use std::fs;
use std::thread;

use anyhow::{anyhow, Context};
use metaage::data::{compute_oracle, format, kfold, read_features, split, synth_generate, Dataset, SynthConfig};
use metaage::losses::LossConfig;
use metaage::metrics::{
    retrieve, retrieve_from_gallery, slice_agreement, weight_embedding, EvalResult, RetrievalResult,
};
use metaage::training::checkpoint;
use metaage::training::{
    lambda_delta_sweep, load_checkpoint, predict, train, write_history_csv, write_sweep_csv, AdamConfig, TrainConfig,
};
use metaage::Dims;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{Command, EvalArgs, RetrieveArgs, SweepArgs, SynthArgs, TrainArgs, TrainOpts};
use crate::report::{sig6, Run};
use crate::Failure;

type CmdResult = Result<(), Failure>;

pub fn run(command: Command) -> CmdResult {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Retrieve(a) => retrieve_cmd(&a),
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Oracle file written by `synth`, computed on the test split.
#[derive(Debug, Serialize, Deserialize)]
pub struct OracleReport {
    pub split: String,
    pub n_samples: usize,
    pub bayes_mae_global: f64,
    pub bayes_mae_personal: f64,
    /// True offset per identity id, over all identities.
    pub offsets: Vec<f64>,
}

fn synth(a: &SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_identities: a.identities,
        samples_per_identity: a.per_identity,
        classes: a.k,
        age_dim: a.age_dim,
        identity_dim: a.identity_dim,
        latent_dim: a.latent_dim,
        offset_max: a.offset_max,
        feature_noise: a.noise,
        rbf_width: a.rbf_width,
        seed: a.seed,
    };
    cfg.validate().map_err(usage)?;
    match a.folds {
        Some(k) if k < 2 || a.fold >= k => {
            return Err(usage(format!(
                "need --folds >= 2 and --fold < --folds, got {k} and {}",
                a.fold
            )))
        }
        None if !(a.train_frac > 0.0 && a.train_frac < 1.0) => {
            return Err(usage(format!("--train-frac must be in (0, 1), got {}", a.train_frac)))
        }
        _ => {}
    }
    let split_seed = a.split_seed.unwrap_or(a.seed);

    let mut run = Run::start("synth", &a.out)?;
    let (data, truth) = synth_generate(&cfg)?;
    let (train_set, test_set) = match a.folds {
        Some(k) => kfold(&data, k, a.fold, split_seed, true)?,
        None => split(&data, (a.train_frac, 1.0 - a.train_frac), split_seed, true)?,
    };
    let oracle = compute_oracle(&test_set, &truth.offsets, &cfg)?;
    let report = OracleReport {
        split: "test".into(),
        n_samples: test_set.len(),
        bayes_mae_global: oracle.bayes_mae_global,
        bayes_mae_personal: oracle.bayes_mae_personal,
        offsets: truth.offsets,
    };
    run.write("train.mafv1", format::encode(&train_set)?)?;
    run.write("test.mafv1", format::encode(&test_set)?)?;
    run.write(
        "oracle.json",
        serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n",
    )?;
    println!(
        "{} train / {} test samples in {}; test oracle MAE global {} personal {}",
        train_set.len(),
        test_set.len(),
        a.out.display(),
        sig6(report.bayes_mae_global),
        sig6(report.bayes_mae_personal)
    );
    run.finish(
        json!({ "args": a, "synth": cfg, "split_seed": split_seed }),
        Some(a.seed),
    )?;
    Ok(())
}

/// Builds and validates the training config; dims other than `H` come
/// from `data` when given.
fn train_config(
    opts: &TrainOpts,
    kind: metaage::training::ModelKind,
    data: Option<&Dataset>,
) -> Result<TrainConfig, Failure> {
    let mut dims = Dims {
        hidden: opts.hidden,
        ..Dims::default()
    };
    if let Some(d) = data {
        let dd = d.dims();
        dims = Dims::new(dd.classes, dd.age_dim, dd.identity_dim, opts.hidden);
    }
    let cfg = TrainConfig {
        dims,
        loss: LossConfig {
            lambda: opts.lambda,
            delta: opts.delta,
            target_mode: opts.target.into(),
        },
        adam: AdamConfig {
            lr: opts.lr,
            beta1: opts.beta1,
            beta2: opts.beta2,
            epsilon: opts.adam_eps,
        },
        batch_size: opts.batch,
        epochs: opts.epochs,
        seed: opts.seed,
        model_kind: kind,
        use_adapter: opts.adapter,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn read(path: &std::path::Path) -> Result<Dataset, Failure> {
    Ok(read_features(path).with_context(|| format!("reading {}", path.display()))?)
}

fn train_cmd(a: &TrainArgs) -> CmdResult {
    train_config(&a.opts, a.model, None)?;
    let data = read(&a.data)?;
    let cfg = train_config(&a.opts, a.model, Some(&data))?;
    let mut run = Run::start("train", &a.out)?;
    let trained = train(&data, &cfg).context("training")?;
    run.write("model.mapc", checkpoint::encode(&trained.model)?)?;
    let mut csv = Vec::new();
    write_history_csv(&mut csv, &trained.history)?;
    run.write("history.csv", csv)?;
    if let Some(last) = trained.history.last() {
        println!(
            "{} trained {} epochs on {} samples: loss {} train MAE {}",
            cfg.model_kind,
            cfg.epochs,
            data.len(),
            sig6(last.loss),
            sig6(last.train_mae)
        );
    }
    run.finish(json!({ "args": a, "train": cfg }), Some(cfg.seed))?;
    Ok(())
}

fn eval(a: &EvalArgs) -> CmdResult {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = read(&a.data)?;
    let preds = predict(&model, &data)?;
    let sigmas = data.sigmas();
    let result = EvalResult::compute(&preds, &data.labels(), sigmas.as_deref(), a.theta_max)?;
    let mut run = Run::start("eval", &a.out)?;
    run.write("eval.json", result.to_json() + "\n")?;
    let mut csv = Vec::new();
    result.write_cs_csv(&mut csv)?;
    run.write("cs.csv", csv)?;
    let cs5 = result
        .cs_curve
        .iter()
        .find(|c| c.0 == 5)
        .map(|c| format!(" CS(5) {}%", sig6(c.1)))
        .unwrap_or_default();
    let eps = result
        .eps_error
        .map(|e| format!(" eps-error {}", sig6(e)))
        .unwrap_or_default();
    println!("{} samples: MAE {}{cs5}{eps}", result.n_samples, sig6(result.mae));
    run.finish(json!({ "args": a, "model_kind": model.kind() }), None)?;
    Ok(())
}

fn sweep(a: &SweepArgs) -> CmdResult {
    let base = train_config(&a.opts, a.model, None)?;
    if a.lambdas.is_empty() || a.deltas.is_empty() {
        return Err(usage("--lambdas and --deltas need at least one value each"));
    }
    for &lambda in &a.lambdas {
        LossConfig { lambda, ..base.loss }.validate().map_err(usage)?;
    }
    for &delta in &a.deltas {
        LossConfig { delta, ..base.loss }.validate().map_err(usage)?;
    }
    if a.threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    let train_set = read(&a.data)?;
    let test_set = read(&a.test)?;
    let cfg = train_config(&a.opts, a.model, Some(&train_set))?;
    let threads = a
        .threads
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()));
    let mut run = Run::start("sweep", &a.out)?;
    let rows = lambda_delta_sweep(&train_set, &test_set, &cfg, &a.lambdas, &a.deltas, threads)?;
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows)?;
    run.write("sweep.csv", csv)?;
    for r in &rows {
        println!(
            "lambda {:<8} delta {:<8} MAE {}",
            sig6(r.lambda),
            sig6(r.delta),
            sig6(r.mae)
        );
    }
    run.finish(json!({ "args": a, "train": cfg, "threads": threads }), Some(cfg.seed))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct QueryReport {
    query: usize,
    identity_id: Option<u32>,
    ranked_indices: Vec<usize>,
    distances: Vec<f64>,
    top_same_identity: Option<f64>,
    bottom_same_identity: Option<f64>,
    top_same_offset_sign: Option<f64>,
    bottom_same_offset_sign: Option<f64>,
}

#[derive(Debug, Serialize)]
struct RetrievalReport {
    n_queries: usize,
    n_gallery: usize,
    percent: f64,
    /// Every distance is zero, as with a zero residual output layer.
    degenerate: bool,
    mean_top_same_identity: Option<f64>,
    mean_bottom_same_identity: Option<f64>,
    mean_top_same_offset_sign: Option<f64>,
    mean_bottom_same_offset_sign: Option<f64>,
    queries: Vec<QueryReport>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn retrieve_cmd(a: &RetrieveArgs) -> CmdResult {
    if !(a.percent > 0.0 && a.percent <= 100.0) {
        return Err(usage(format!("--percent must be in (0, 100], got {}", a.percent)));
    }
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let Some(params) = model.metalearner() else {
        return Err(Failure::Runtime(anyhow!(
            "retrieval needs a metaage checkpoint; {} checkpoints have no per-sample weights",
            model.kind()
        )));
    };
    let gallery = read(&a.gallery)?;
    let queries = a.queries.as_deref().map(read).transpose()?;
    let offsets = match &a.oracle {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let oracle: OracleReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Some(oracle.offsets)
        }
        None => None,
    };
    if gallery.len() < 2 && queries.is_none() {
        return Err(Failure::Runtime(anyhow!("gallery needs at least 2 samples")));
    }

    let embed = |ds: &Dataset| -> anyhow::Result<Vec<Vec<f64>>> {
        ds.records()
            .iter()
            .map(|r| weight_embedding(params, &r.id_feat).map_err(anyhow::Error::from))
            .collect()
    };
    let gallery_emb = embed(&gallery).context("gallery")?;
    let query_set = queries.as_ref().unwrap_or(&gallery);
    let query_emb = match &queries {
        Some(q) => embed(q).context("queries")?,
        None => gallery_emb.clone(),
    };
    let offset_sign = |id: Option<u32>| -> Option<bool> {
        let offsets = offsets.as_ref()?;
        offsets.get(id? as usize).map(|o| *o >= 0.0)
    };

    let gallery_ids_known = gallery.records().iter().all(|g| g.identity_id.is_some());
    let gallery_signs_known = gallery.records().iter().all(|g| offset_sign(g.identity_id).is_some());
    let mut reports = Vec::with_capacity(query_set.len());
    let mut max_distance = 0.0f64;
    for (q, rec) in query_set.records().iter().enumerate() {
        let result: RetrievalResult = match &queries {
            Some(_) => retrieve(&query_emb[q], &gallery_emb)?,
            None => retrieve_from_gallery(&gallery_emb, q)?,
        };
        max_distance = result.distances.iter().copied().fold(max_distance, f64::max);
        let (top_id, bottom_id) = if rec.identity_id.is_some() && gallery_ids_known {
            let (t, b) = slice_agreement(&result, a.percent, |g| gallery.get(g).identity_id == rec.identity_id);
            (Some(t), Some(b))
        } else {
            (None, None)
        };
        let (top_sign, bottom_sign) = match offset_sign(rec.identity_id) {
            Some(s) if gallery_signs_known => {
                let (t, b) = slice_agreement(&result, a.percent, |g| {
                    offset_sign(gallery.get(g).identity_id) == Some(s)
                });
                (Some(t), Some(b))
            }
            _ => (None, None),
        };
        let keep = a.max_ranked.unwrap_or(usize::MAX).min(result.ranked_indices.len());
        reports.push(QueryReport {
            query: q,
            identity_id: rec.identity_id,
            ranked_indices: result.ranked_indices[..keep].to_vec(),
            distances: result.distances[..keep].to_vec(),
            top_same_identity: top_id,
            bottom_same_identity: bottom_id,
            top_same_offset_sign: top_sign,
            bottom_same_offset_sign: bottom_sign,
        });
    }
    let report = RetrievalReport {
        n_queries: reports.len(),
        n_gallery: gallery.len(),
        percent: a.percent,
        degenerate: max_distance == 0.0,
        mean_top_same_identity: mean(reports.iter().map(|r| r.top_same_identity)),
        mean_bottom_same_identity: mean(reports.iter().map(|r| r.bottom_same_identity)),
        mean_top_same_offset_sign: mean(reports.iter().map(|r| r.top_same_offset_sign)),
        mean_bottom_same_offset_sign: mean(reports.iter().map(|r| r.bottom_same_offset_sign)),
        queries: reports,
    };
    if a.oracle.is_some() && report.mean_top_same_offset_sign.is_none() {
        return Err(Failure::Runtime(anyhow!(
            "oracle offsets do not cover the identity ids of the query and gallery files"
        )));
    }

    let mut run = Run::start("retrieve", &a.out)?;
    run.write(
        "retrieval.json",
        serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n",
    )?;
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{}%", sig6(100.0 * x)));
    println!(
        "{} queries x {} gallery{}: same identity top {} bottom {}; same offset sign top {} bottom {}",
        report.n_queries,
        report.n_gallery,
        if report.degenerate {
            " (degenerate: all distances 0)"
        } else {
            ""
        },
        pct(report.mean_top_same_identity),
        pct(report.mean_bottom_same_identity),
        pct(report.mean_top_same_offset_sign),
        pct(report.mean_bottom_same_offset_sign)
    );
    run.finish(json!({ "args": a, "model_kind": model.kind() }), None)?;
    Ok(())
}
