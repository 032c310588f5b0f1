//! Minibatch training, evaluation and the λ/δ sweep.

use std::io::Write;
use std::thread;

use super::adam::{adam_step, AdamState};
use super::config::TrainConfig;
use super::model::{Batch, BatchInputs, Model, ModelKind};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{mae, EvalResult, DEFAULT_THETA_MAX};

/// Rows per eval-mode forward pass.
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// MAE of train-mode predictions made before each update.
    pub train_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }
}

/// Trains a freshly initialized `config.model_kind` model.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    let model = Model::init(config.model_kind, config.dims, config.use_adapter, config.seed)?;
    train_from(model, dataset, config)
}

/// The concatenated-features MLP baseline with the same hidden width,
/// losses and optimizer.
pub fn train_baseline_concat(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    train(
        dataset,
        &TrainConfig {
            model_kind: ModelKind::Concat,
            ..*config
        },
    )
}

/// Continues training `model`. `config.model_kind` and `config.use_adapter`
/// are ignored in favor of the model's own structure.
pub fn train_from(mut model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    config.check_data(&dataset.dims())?;
    if model.dims != config.dims {
        return Err(Error::shape(
            "model dims",
            format!("{:?}", config.dims),
            format!("{:?}", model.dims),
        ));
    }
    if dataset.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 training records, got {}",
            dataset.len()
        )));
    }
    let mut state = AdamState::new(&model.group_sizes());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let schedule = batches(dataset.len(), config.batch_size, config.seed, epoch as u64)?;
        let (mut loss_sum, mut abs_err, mut seen) = (0.0, 0.0, 0usize);
        for (bi, idx) in schedule.iter().enumerate() {
            let batch = Batch::from_dataset(dataset, idx, config.loss.target_mode)?;
            let out = step(&mut model, &batch, config, &mut state).map_err(|e| match e {
                Error::NonFinite(message) => Error::Diverged {
                    epoch,
                    batch: bi,
                    message,
                },
                other => other,
            })?;
            loss_sum += out.0;
            abs_err += out.1;
            seen += batch.len();
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / schedule.len() as f64,
            train_mae: abs_err / seen as f64,
        });
    }
    Ok(TrainedModel { model, history })
}

/// One optimizer update on one batch; returns `(loss, sum of abs errors)`.
pub fn step(model: &mut Model, batch: &Batch, config: &TrainConfig, state: &mut AdamState) -> Result<(f64, f64)> {
    let out = model.loss_and_grad(batch, &config.loss)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", out.loss)));
    }
    adam_step(&mut model.groups_mut(), state, &config.adam)?;
    if let Some(cache) = &out.bn_cache {
        model.apply_bn_update(cache);
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("parameters became non-finite after the update".into()));
    }
    let abs_err = out
        .predictions
        .iter()
        .zip(&batch.labels)
        .map(|(p, y)| (p - y).abs())
        .sum();
    Ok((out.loss, abs_err))
}

/// Eval-mode expected ages for every record, in order.
pub fn predict(model: &Model, dataset: &Dataset) -> Result<Vec<f64>> {
    let d = dataset.dims();
    if (d.classes, d.age_dim, d.identity_dim) != (model.dims.classes, model.dims.age_dim, model.dims.identity_dim) {
        return Err(Error::shape(
            "dataset dims",
            format!(
                "K={}, D={}, F={}",
                model.dims.classes, model.dims.age_dim, model.dims.identity_dim
            ),
            format!("K={}, D={}, F={}", d.classes, d.age_dim, d.identity_dim),
        ));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in all.chunks(PREDICT_CHUNK) {
        out.extend(model.predict(&BatchInputs::from_dataset(dataset, chunk)?)?);
    }
    Ok(out)
}

/// Metrics of eval-mode predictions; ε-error only when every record has a sigma.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalResult> {
    let preds = predict(model, dataset)?;
    let sigmas = dataset.sigmas();
    EvalResult::compute(&preds, &dataset.labels(), sigmas.as_deref(), DEFAULT_THETA_MAX)
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochStats]) -> Result<()> {
    writeln!(w, "epoch,loss,train_mae")?;
    for h in history {
        writeln!(w, "{},{},{}", h.epoch, h.loss, h.train_mae)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub delta: f64,
    pub mae: f64,
}

/// One train + evaluate per `(λ, δ)` with the shared seed, rows in grid
/// order (λ outer). Grid points run on up to `threads` worker threads.
pub fn lambda_delta_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    lambdas: &[f64],
    deltas: &[f64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || deltas.is_empty() {
        return Err(Error::invalid("sweep grids must be non-empty"));
    }
    let points: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| deltas.iter().map(move |&d| (l, d)))
        .collect();
    let configs: Vec<TrainConfig> = points
        .iter()
        .map(|&(lambda, delta)| {
            let mut c = *config;
            c.loss.lambda = lambda;
            c.loss.delta = delta;
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let run = |c: &TrainConfig| -> Result<f64> {
        let trained = train(train_set, c)?;
        mae(&predict(&trained.model, test_set)?, &test_set.labels())
    };
    let threads = threads.clamp(1, configs.len());
    let mut maes: Vec<Option<Result<f64>>> = (0..configs.len()).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let configs = &configs;
                let run = &run;
                s.spawn(move || {
                    (t..configs.len())
                        .step_by(threads)
                        .map(|i| (i, run(&configs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                maes[i] = Some(r);
            }
        }
    });
    points
        .into_iter()
        .zip(maes)
        .map(|((lambda, delta), m)| {
            Ok(SweepRow {
                lambda,
                delta,
                mae: m.expect("every grid point ran")?,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "lambda,delta,mae")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.lambda, r.delta, r.mae)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::metalearner::Dims;

    fn tiny() -> (Dataset, TrainConfig) {
        let cfg = SynthConfig {
            n_identities: 8,
            samples_per_identity: 8,
            classes: 11,
            age_dim: 6,
            identity_dim: 4,
            offset_max: 1.0,
            ..Default::default()
        };
        let (ds, _) = synth_generate(&cfg).unwrap();
        let tc = TrainConfig {
            dims: Dims::new(11, 6, 4, 8),
            batch_size: 16,
            epochs: 1,
            seed: 5,
            ..Default::default()
        };
        (ds, tc)
    }

    #[test]
    fn smoke_all_kinds() {
        let (ds, tc) = tiny();
        for kind in [ModelKind::Metaage, ModelKind::Global, ModelKind::Concat] {
            let t = train(
                &ds,
                &TrainConfig {
                    model_kind: kind,
                    use_adapter: true,
                    ..tc
                },
            )
            .unwrap();
            assert_eq!(t.history.len(), 1);
            assert!(t.history[0].loss.is_finite() && t.history[0].train_mae.is_finite());
            assert_eq!(t.kind(), kind);
        }
        assert!(train(&ds, &TrainConfig { epochs: 0, ..tc }).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, tc) = tiny();
        let tc = TrainConfig { epochs: 2, ..tc };
        let a = train_baseline_concat(&ds, &tc).unwrap();
        let b = train_baseline_concat(&ds, &tc).unwrap();
        assert_eq!(a, b);
        let ea = evaluate(&a.model, &ds).unwrap();
        assert_eq!(ea, evaluate(&a.model, &ds).unwrap());
    }

    #[test]
    fn dims_mismatch_names_field() {
        let (ds, tc) = tiny();
        let tc = TrainConfig {
            dims: Dims::new(11, 7, 4, 8),
            ..tc
        };
        let err = train(&ds, &tc).unwrap_err().to_string();
        assert!(err.contains("age_dim"), "{err}");
    }

    #[test]
    fn zero_global_predicts_midpoint() {
        let (ds, tc) = tiny();
        let mut m = Model::init(ModelKind::Global, tc.dims, false, 0).unwrap();
        let n = m.flat_params().len();
        m.set_flat_params(&vec![0.0; n]).unwrap();
        for p in predict(&m, &ds).unwrap() {
            assert!((p - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_grid_order_and_single_point() {
        let (ds, tc) = tiny();
        let rows = lambda_delta_sweep(&ds, &ds, &tc, &[0.0, 0.2], &[1.0, 2.0], 3).unwrap();
        let grid: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.delta)).collect();
        assert_eq!(grid, vec![(0.0, 1.0), (0.0, 2.0), (0.2, 1.0), (0.2, 2.0)]);
        let single = lambda_delta_sweep(&ds, &ds, &tc, &[0.0], &[2.0], 1).unwrap();
        let mut c = tc;
        c.loss.lambda = 0.0;
        let direct = mae(&predict(&train(&ds, &c).unwrap().model, &ds).unwrap(), &ds.labels()).unwrap();
        assert_eq!(single[0].mae, direct);
        assert_eq!(single[0].mae, rows[1].mae);
        assert!(lambda_delta_sweep(&ds, &ds, &tc, &[], &[2.0], 1).is_err());
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &single).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("lambda,delta,mae\n0,2,"));
    }
}
