mod common;

use common::{gaussian, gram_ref, rel, rng};
use kslv::data::{encode_targets, synth_blobs};
use kslv::model::{sidecar_path, ModelMeta};
use kslv::projection::Ep2Config;
use kslv::solver::ProjectionMode;
use kslv::{classify, predict_auxiliary, AuxiliaryState, KernelModel, KernelSpec, NystromPreconditioner, TrainConfig, Trainer};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn trainer(period: usize) -> Trainer<f64> {
    let data = synth_blobs(120, 3, 3, 0.4, 5).unwrap();
    let y = data.targets.matrix();
    let z = data.x.rows(0, 30).into_owned();
    let cfg = TrainConfig {
        batch_size: 10,
        nystrom_size: Some(24),
        level: Some(4),
        period: Some(period),
        epochs: 2,
        seed: 8,
        projection: ProjectionMode::Inexact(Ep2Config { epochs: 3, ..Default::default() }),
        ..Default::default()
    };
    Trainer::new(data.x, y, z, KernelSpec::laplace(1.0).unwrap(), cfg).unwrap()
}

/// The three terms of the auxiliary model, each from the double-loop kernel.
fn auxiliary_oracle(
    model: &KernelModel<f64>,
    state: &AuxiliaryState<f64>,
    pre: &NystromPreconditioner<f64>,
    x: &DMatrix<f64>,
) -> DMatrix<f64> {
    let spec = model.spec();
    let mut out = gram_ref(spec, x, model.centers()) * model.weights();
    for (block, w) in state.tmp_centers.iter().zip(&state.tmp_weights) {
        out += gram_ref(spec, x, block) * w;
    }
    out + gram_ref(spec, x, pre.subsample()) * &state.nystrom_weights
}

#[test]
fn predict_matches_double_loop() {
    let mut r = rng(1);
    for spec in [KernelSpec::laplace(0.8).unwrap(), KernelSpec::gaussian(1.4).unwrap()] {
        let z = gaussian(&mut r, 17, 4, 1.0);
        let w = gaussian(&mut r, 17, 3, 1.0);
        let x = gaussian(&mut r, 23, 4, 1.0);
        let model = KernelModel::new(spec, z.clone(), w.clone()).unwrap();
        let got = model.predict(&x).unwrap();
        let mut oracle = DMatrix::zeros(23, 3);
        for i in 0..23 {
            for j in 0..17 {
                let k = common::kernel_ref(&spec, &x.row(i).iter().copied().collect::<Vec<_>>(), &z.row(j).iter().copied().collect::<Vec<_>>());
                for c in 0..3 {
                    oracle[(i, c)] += k * w[(j, c)];
                }
            }
        }
        assert!(rel(&got, &oracle) <= 1e-13);
    }
    let model = KernelModel::<f64>::zeros(KernelSpec::laplace(1.0).unwrap(), DMatrix::zeros(2, 3), 1).unwrap();
    assert!(model.predict(&DMatrix::zeros(4, 2)).is_err());
}

#[test]
fn auxiliary_with_single_temporary_block() {
    let mut r = rng(2);
    let spec = KernelSpec::laplace(1.0).unwrap();
    let z = gaussian(&mut r, 6, 2, 1.0);
    let model = KernelModel::zeros(spec, z, 2).unwrap();
    let pre = NystromPreconditioner::build(&gaussian(&mut r, 20, 2, 1.0), &spec, 8, 2, 0).unwrap();
    let mut state = AuxiliaryState::new(6, 8, 2);
    let x1 = gaussian(&mut r, 4, 2, 1.0);
    let beta = gaussian(&mut r, 4, 2, 1.0);
    state.tmp_centers.push(x1.clone());
    state.tmp_weights.push(beta.clone());
    state.nystrom_weights = gaussian(&mut r, 8, 2, 1.0);
    let probe = gaussian(&mut r, 5, 2, 1.0);
    let expected = gram_ref(&spec, &probe, &x1) * beta + gram_ref(&spec, &probe, pre.subsample()) * &state.nystrom_weights;
    assert!(rel(&predict_auxiliary(&model, &state, &pre, &probe).unwrap(), &expected) <= 1e-13);
}

#[test]
fn auxiliary_consistency_through_a_period() {
    let mut t = trainer(6);
    let schedule = t.batches_for_epoch(0);
    let probe = gaussian(&mut rng(3), 15, 3, 1.0);
    for (i, rows) in schedule.iter().take(12).enumerate() {
        t.step(rows).unwrap();
        let state = t.state();
        let pre = &t.preconditioner().base;
        let got = predict_auxiliary(t.model(), state, pre, &probe).unwrap();
        let oracle = auxiliary_oracle(t.model(), state, pre, &probe);
        let err = if oracle.norm() == 0.0 { got.norm() } else { rel(&got, &oracle) };
        assert!(err <= 1e-9, "step {i}: {err:e}");
        assert_eq!(state.tmp_centers.len(), state.batches_seen);
        for (block, w) in state.tmp_centers.iter().zip(&state.tmp_weights) {
            assert_eq!(block.nrows(), w.nrows());
        }
    }
}

#[test]
fn temporary_weights_are_never_modified() {
    let mut t = trainer(5);
    let schedule = t.batches_for_epoch(0);
    t.step(&schedule[0]).unwrap();
    let first = t.state().tmp_weights[0].clone();
    let first_x = t.state().tmp_centers[0].clone();
    for rows in &schedule[1..4] {
        t.step(rows).unwrap();
        assert_eq!(t.state().tmp_weights[0], first);
        assert_eq!(t.state().tmp_centers[0], first_x);
    }
}

#[test]
fn state_resets_after_every_projection() {
    let mut t = trainer(3);
    let p = t.model().num_centers();
    let s = t.preconditioner().base.size();
    for epoch in 0..2 {
        for rows in t.batches_for_epoch(epoch) {
            let before = t.state().batches_seen;
            t.step(&rows).unwrap();
            if before + 1 == t.period() {
                let st = t.state();
                assert!(st.is_reset());
                assert!(st.tmp_centers.is_empty() && st.tmp_weights.is_empty());
                assert_eq!(st.batches_seen, 0);
                assert_eq!(st.nystrom_weights, DMatrix::zeros(s, 3));
                assert_eq!(st.accumulated, DMatrix::zeros(p, 3));
            } else {
                assert!(!t.state().is_reset());
            }
        }
        t.project().unwrap();
        assert!(t.state().is_reset());
    }
}

fn rows_strategy() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..12, 2usize..7).prop_flat_map(|(n, c)| {
        proptest::collection::vec(-10.0f64..10.0, n * c).prop_map(move |v| DMatrix::from_row_slice(n, c, &v))
    })
}

proptest! {
    #[test]
    fn classify_ignores_row_offsets(values in rows_strategy(), shift in -100i32..100) {
        // Integral entries keep the shifted comparison exact.
        let values = values.map(f64::round);
        let shifted = values.map(|v| v + shift as f64);
        prop_assert_eq!(classify(&shifted).unwrap(), classify(&values).unwrap());
    }

    #[test]
    fn classify_matches_linear_scan(values in rows_strategy()) {
        let got = classify(&values).unwrap();
        for (i, row) in values.row_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = row.iter().position(|v| *v == max).unwrap();
            prop_assert_eq!(got[i], first);
        }
    }
}

#[test]
fn classify_recovers_one_hot_labels() {
    let labels = vec![2, 0, 1, 1, 4, 3];
    assert_eq!(classify(&encode_targets(&labels, 5).unwrap()).unwrap(), labels);
}

#[test]
fn save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(4);
    let model = KernelModel::new(KernelSpec::gaussian(0.7).unwrap(), gaussian(&mut r, 9, 3, 1.0), gaussian(&mut r, 9, 4, 1.0)).unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = KernelModel::<f64>::load(&path).unwrap();
    assert_eq!(back, model);
    let x = gaussian(&mut r, 5, 3, 1.0);
    assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!((meta.centers, meta.dim, meta.outputs), (9, 3, 4));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 1);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(KernelModel::<f64>::load(&path), Err(kslv::Error::Input(_))));
    std::fs::write(&path, b"not a model").unwrap();
    assert!(KernelModel::<f64>::load(&path).is_err());
    assert!(matches!(KernelModel::<f64>::load(&dir.path().join("missing")), Err(kslv::Error::Io(_))));
}
