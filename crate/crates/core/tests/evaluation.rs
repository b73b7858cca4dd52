#![allow(clippy::field_reassign_with_default)]

use ndarray::Array3;
use proptest::prelude::*;
use sal_core::data::phantom_dataset;
use sal_core::evaluation::{
    dice, make_folds, mean_dsc, mean_over_subjects, run_protocol, Method, SubjectDice,
};
use sal_core::training::{pretrain, ExperimentConfig};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.pairing.n = 4;
    cfg.augment.output_size = [16, 16];
    cfg.loss.omega = 2;
    cfg.model.base_width = 4;
    cfg.model.proj_dim = 8;
    cfg.pretrain.epochs = 1;
    cfg.pretrain.iterations_per_epoch = Some(2);
    cfg.finetune.iterations = 2;
    cfg.finetune.batch_size = 2;
    cfg
}

#[test]
fn protocol_rows_aggregate_exactly_k_folds() {
    let ds = phantom_dataset(6, 16, 16, 16, 0).unwrap();
    let cfg = tiny();
    let pre = pretrain(&ds, &cfg, |_| {}).unwrap();
    let methods = [Method::random(), Method::pretrained("sal", &pre.checkpoint)];
    let table = run_protocol(&ds, &methods, &[1, 2], 3, 4, &cfg).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.records.len(), 12);
    for row in &table.rows {
        assert_eq!(row.folds.len(), 3);
        let mean = row.folds.iter().sum::<f64>() / 3.0;
        let var = row.folds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((row.mean - mean).abs() < 1e-12);
        assert!((row.std - var.sqrt()).abs() < 1e-12);
        assert!(row.folds.iter().all(|d| (0.0..=1.0).contains(d)));
    }
    // Both methods fine-tune on the same subjects.
    for r in table.records.iter().filter(|r| r.method == "random") {
        let twin = table
            .records
            .iter()
            .find(|o| o.method == "sal" && o.m == r.m && o.fold == r.fold)
            .unwrap();
        assert_eq!(twin.labeled, r.labeled);
        assert_eq!(r.labeled.len(), r.m);
    }
    let csv = table.to_csv();
    assert!(csv.starts_with("method,m,mean_dsc,std,fold0,fold1,fold2\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn random_control_with_all_training_subjects() {
    let ds = phantom_dataset(5, 16, 16, 16, 1).unwrap();
    let cfg = tiny();
    let table = run_protocol(&ds, &[Method::random()], &[4], 5, 0, &cfg).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].folds.len(), 5);
}

#[test]
fn protocol_is_independent_of_worker_count() {
    let ds = phantom_dataset(4, 16, 16, 16, 2).unwrap();
    let mut cfg = tiny();
    let one = run_protocol(&ds, &[Method::random()], &[1], 2, 9, &cfg).unwrap();
    cfg.workers = 3;
    let three = run_protocol(&ds, &[Method::random()], &[1], 2, 9, &cfg).unwrap();
    assert_eq!(one, three);
}

#[test]
fn budget_larger_than_training_split_is_rejected() {
    let ds = phantom_dataset(4, 16, 16, 16, 0).unwrap();
    assert!(run_protocol(&ds, &[Method::random()], &[4], 2, 0, &tiny()).is_err());
    assert!(make_folds(&ds.subject_ids(), 5, 1, 0).is_err());
}

fn labels() -> impl Strategy<Value = Array3<u8>> {
    prop::collection::vec(0u8..3, 27).prop_map(|v| Array3::from_shape_vec((3, 3, 3), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric(a in labels(), b in labels()) {
        let (ma, mb) = (a.mapv(|v| v == 1), b.mapv(|v| v == 1));
        prop_assert_eq!(dice(&ma, &mb).unwrap(), dice(&mb, &ma).unwrap());
        if ma.iter().any(|&v| v) {
            prop_assert_eq!(dice(&ma, &ma).unwrap(), 1.0);
        }
    }

    #[test]
    fn subject_order_does_not_change_the_mean(
        pairs in prop::collection::vec((labels(), labels()), 1..6),
        rot in 0usize..6,
    ) {
        let scores: Vec<SubjectDice> = pairs
            .iter()
            .map(|(p, g)| mean_dsc(p, g, 3).unwrap())
            .collect();
        let mut shuffled = scores.clone();
        shuffled.rotate_left(rot % scores.len());
        shuffled.reverse();
        prop_assert!((mean_over_subjects(&scores) - mean_over_subjects(&shuffled)).abs() < 1e-12);
    }
}
