use metaage::data::{format, synth_generate, Dataset, SynthConfig};
use metaage::losses::{LossConfig, TargetMode};
use metaage::training::{
    adam_step, evaluate, load_checkpoint, predict, save_checkpoint, train, AdamConfig, AdamState, Batch, Model,
    ModelBody, ModelKind, TrainConfig,
};
use metaage::{Dims, Error};

fn small() -> (Dataset, TrainConfig) {
    let synth = SynthConfig {
        n_identities: 10,
        samples_per_identity: 6,
        classes: 21,
        age_dim: 12,
        identity_dim: 5,
        offset_max: 2.0,
        ..Default::default()
    };
    let (ds, _) = synth_generate(&synth).unwrap();
    let cfg = TrainConfig {
        dims: Dims::new(21, 12, 5, 16),
        batch_size: 12,
        epochs: 2,
        seed: 4,
        ..Default::default()
    };
    (ds, cfg)
}

#[test]
fn zero_residual_step_matches_global() {
    let (ds, cfg) = small();
    for use_adapter in [false, true] {
        let mut meta = Model::init(ModelKind::Metaage, cfg.dims, use_adapter, 2).unwrap();
        meta.metalearner_mut().unwrap().zero_residual_output();
        let mut global = Model::init(ModelKind::Global, cfg.dims, use_adapter, 2).unwrap();
        let idx: Vec<usize> = (0..12).collect();
        for mode in [TargetMode::HardOnehot, TargetMode::LabelDistribution] {
            let batch = Batch::from_dataset(&ds, &idx, mode).unwrap();
            let loss = LossConfig {
                target_mode: mode,
                ..Default::default()
            };
            let a = meta.loss_and_grad(&batch, &loss).unwrap();
            let b = global.loss_and_grad(&batch, &loss).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-12);
            let ga = meta.metalearner().unwrap().grad_common.clone();
            let ModelBody::Global(head) = &global.body else {
                unreachable!()
            };
            assert!(ga.max_abs_diff(&head.grad_common) < 1e-12);
        }

        // one update of W^c with the residual output held at zero
        let adam = AdamConfig::default();
        let p = meta.metalearner_mut().unwrap();
        let mut sa = AdamState::new(&[p.common.as_slice().len()]);
        let grad = p.grad_common.clone();
        adam_step(&mut [(p.common.as_mut_slice(), grad.as_slice())], &mut sa, &adam).unwrap();
        let ModelBody::Global(head) = &mut global.body else {
            unreachable!()
        };
        let mut sb = AdamState::new(&[head.common.as_slice().len()]);
        let grad = head.grad_common.clone();
        adam_step(&mut [(head.common.as_mut_slice(), grad.as_slice())], &mut sb, &adam).unwrap();
        assert!(meta.metalearner().unwrap().common.max_abs_diff(&head.common) < 1e-12);
        let (pa, pb) = (predict(&meta, &ds).unwrap(), predict(&global, &ds).unwrap());
        assert!(pa.iter().zip(&pb).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn training_leaves_dataset_untouched() {
    let (ds, cfg) = small();
    let before = format::encode(&ds).unwrap();
    for kind in [ModelKind::Metaage, ModelKind::Global, ModelKind::Concat] {
        train(
            &ds,
            &TrainConfig {
                model_kind: kind,
                ..cfg
            },
        )
        .unwrap();
    }
    assert_eq!(format::encode(&ds).unwrap(), before);
}

#[test]
fn evaluation_is_side_effect_free() {
    let (ds, cfg) = small();
    let trained = train(
        &ds,
        &TrainConfig {
            use_adapter: true,
            ..cfg
        },
    )
    .unwrap();
    let snapshot = trained.model.clone();
    let first = evaluate(&trained.model, &ds).unwrap();
    let second = evaluate(&trained.model, &ds).unwrap();
    assert_eq!(trained.model, snapshot);
    assert_eq!(first.to_json(), second.to_json());
    assert!(first.eps_error.is_some());
}

#[test]
fn checkpoint_file_preserves_predictions() {
    let (ds, cfg) = small();
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Metaage, ModelKind::Global, ModelKind::Concat] {
        let trained = train(
            &ds,
            &TrainConfig {
                model_kind: kind,
                use_adapter: kind != ModelKind::Global,
                ..cfg
            },
        )
        .unwrap();
        let path = dir.path().join(format!("{kind}.mapc"));
        save_checkpoint(&path, &trained.model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind(), kind);
        assert_eq!(predict(&loaded, &ds).unwrap(), predict(&trained.model, &ds).unwrap());
    }
}

#[test]
fn label_distribution_needs_sigma() {
    let (ds, cfg) = small();
    let stripped: Vec<_> = ds
        .records()
        .iter()
        .cloned()
        .map(|mut r| {
            r.sigma = None;
            r
        })
        .collect();
    let stripped = Dataset::new(ds.dims(), stripped).unwrap();
    let mut ld = cfg;
    ld.loss.target_mode = TargetMode::LabelDistribution;
    assert!(train(&stripped, &ld).is_err());
    assert!(train(&stripped, &cfg).is_ok());
    assert!(evaluate(&train(&stripped, &cfg).unwrap().model, &stripped)
        .unwrap()
        .eps_error
        .is_none());
}

#[test]
fn huge_learning_rate_reports_context_or_stays_finite() {
    let (ds, mut cfg) = small();
    cfg.adam.lr = 1e12;
    match train(&ds, &cfg) {
        Ok(t) => assert!(t.model.is_finite() && t.history.iter().all(|h| h.loss.is_finite())),
        Err(Error::Diverged { epoch, batch, .. }) => assert!(epoch < cfg.epochs && batch < ds.len()),
        Err(other) => panic!("unexpected error {other}"),
    }
}
