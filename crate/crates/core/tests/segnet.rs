use ahnet_core::data::{synth_dataset, DatasetBundle, LesionKind, SynthConfig};
use ahnet_core::metrics::{Mask, Summary};
use ahnet_core::segnet::{score, train, NetworkHooks, NetworkSpec, Prediction, TrainConfig, Variant};
use ahnet_core::tensor::optim::OptimizerConfig;

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        depth: 2,
        base_filters: 4,
        input_size: 32,
        state_dim: 4,
        ..NetworkSpec::default()
    }
}

fn bundle() -> DatasetBundle {
    synth_dataset(&SynthConfig::new(7, 8, 32, LesionKind::Blob)).unwrap()
}

fn perfect(mask: &Mask) -> Prediction {
    Prediction {
        mask: mask.clone(),
        foreground: mask.bits().iter().map(|&b| f64::from(u8::from(b))).collect(),
    }
}

#[test]
fn perfect_predictor_scores_ideal_values() {
    let b = bundle();
    let preds: Vec<Prediction> = b.records().iter().map(|r| perfect(&r.label)).collect();
    let report = score(b.records(), &preds).unwrap();
    for c in &report.cases {
        assert_eq!(c.dsc, 1.0);
        assert_eq!(c.iou, 1.0);
        assert_eq!(c.mhd, Some(0.0));
        assert_eq!(c.asd, Some(0.0));
        assert_eq!(c.ravd, Some(0.0));
        assert_eq!(c.auc, Some(1.0));
    }
}

#[test]
fn background_predictor_scores_zero_overlap() {
    let b = bundle();
    let preds: Vec<Prediction> = b
        .records()
        .iter()
        .map(|r| perfect(&Mask::empty(r.label.height(), r.label.width())))
        .collect();
    let report = score(b.records(), &preds).unwrap();
    assert!(report.cases.iter().all(|c| c.dsc == 0.0 && c.iou == 0.0));
    assert!(score(b.records(), &preds[1..]).is_err());
}

#[test]
fn report_means_match_hand_averages() {
    let b = bundle();
    let recs = b.records();
    // Shift each label by one column to get imperfect predictions.
    let preds: Vec<Prediction> = recs
        .iter()
        .map(|r| {
            let mut m = Mask::empty(r.label.height(), r.label.width());
            for (y, x) in r.label.points() {
                m.set(y, (x + 1).min(r.label.width() - 1), true);
            }
            perfect(&m)
        })
        .collect();
    let report = score(recs, &preds).unwrap();
    let n = report.cases.len() as f64;
    let mean_dsc = report.cases.iter().map(|c| c.dsc).sum::<f64>() / n;
    let mean_iou = report.cases.iter().map(|c| c.iou).sum::<f64>() / n;
    assert!((report.aggregate.dsc.mean.unwrap() - mean_dsc).abs() < 1e-12);
    assert!((report.aggregate.iou.mean.unwrap() - mean_iou).abs() < 1e-12);
    let mhd: Vec<f64> = report.cases.iter().filter_map(|c| c.mhd).collect();
    let m = mhd.iter().sum::<f64>() / mhd.len() as f64;
    assert!((report.aggregate.mhd.mean.unwrap() - m).abs() < 1e-12);
    assert_eq!(report.aggregate.mhd, Summary::of(report.cases.iter().map(|c| c.mhd)));
}

#[test]
fn loss_decreases_over_first_epochs() {
    let b = bundle();
    for lr in [1e-3, 3e-3, 1e-2] {
        let cfg = TrainConfig {
            epochs: 5,
            seed: 7,
            optimizer: OptimizerConfig { lr, ..OptimizerConfig::default() },
            ..TrainConfig::default()
        };
        let (_, report) = train(small_spec(), NetworkHooks::default(), cfg, &b, None).unwrap();
        let l = report.losses();
        assert!(l.windows(2).all(|w| w[1] < w[0]), "lr {lr}: {l:?}");
    }
}

#[test]
fn ablation_lattice_builds_and_trains() {
    let b = bundle();
    let mut counts = Vec::new();
    for v in Variant::ALL {
        let (spec, hooks) = v.configure(small_spec());
        let cfg = TrainConfig { epochs: 1, seed: 1, ..TrainConfig::default() };
        let (net, report) = train(spec, hooks, cfg, &b, None).unwrap();
        assert!(report.losses()[0].is_finite(), "{}", v.name());
        assert_eq!(net.hooks().gates_open, v == Variant::HunetLike);
        counts.push(report.parameter_count);
    }
    // Gates stay in the forced-open variant; only Mamba and recon add weights.
    assert_eq!(counts[0], counts[1]);
    assert!(counts[2] > counts[1] && counts[3] > counts[1] && counts[4] > counts[3]);
}
