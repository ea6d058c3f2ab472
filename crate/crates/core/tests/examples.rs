//! Runs every example program and checks what it returns.

macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }
    };
}

example!(make_toy_data);
example!(mixing);
example!(orthogonal_head);
example!(train_dfa);
example!(attack_suite);
example!(ood_detection);
example!(embedding_analysis);
example!(report);

#[test]
fn make_toy_data_round_trips() {
    let (glyphs, gratings) = make_toy_data::run_example().unwrap();
    assert_eq!(glyphs.len(), 200);
    assert_eq!(gratings.len(), 200);
    assert!(glyphs.images.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn mixing_produces_convex_labels() {
    let t = mixing::run_example().unwrap();
    let lam = t.lambda;
    assert!((0.0..=1.0).contains(&lam));
    assert_eq!(t.y_mixed.row(0).to_vec(), vec![lam, 0.0, 1.0 - lam]);
    assert!((t.y_mixed.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn orthogonal_head_is_orthogonal_and_frozen() {
    let head = orthogonal_head::run_example().unwrap();
    assert!(head.max_offdiag_dot() <= 1e-6);
    assert!(head.is_frozen());
}

#[test]
fn train_dfa_reports_aggregation_loss_only_for_dfa() {
    let runs = train_dfa::run_example().unwrap();
    let (vanilla, dfa) = (&runs[0].1, &runs[1].1);
    assert!(vanilla.iter().all(|m| m.l_a == 0.0));
    assert!(dfa.iter().all(|m| m.l_a > 0.0 && m.l_c.is_finite()));
    assert_eq!(dfa.len(), 4);
}

#[test]
fn attack_suite_never_beats_clean_for_budgeted_attacks() {
    let r = attack_suite::run_example().unwrap();
    assert_eq!(r.attacks.len(), 3);
    assert!(r.clean_accuracy > 25.0);
    assert!(r.attacks[1].accuracy <= r.clean_accuracy);
}

#[test]
fn ood_detection_beats_nothing_worse_than_all_id() {
    let r = ood_detection::run_example().unwrap();
    assert!(r.best_f1 >= r.all_positive_f1());
    assert_eq!((r.n_id, r.n_ood), (40, 40));
}

#[test]
fn embedding_analysis_reports_both_models() {
    let [(c0, p0), (c1, p1)] = embedding_analysis::run_example().unwrap();
    assert_eq!(c0.per_class_std.len(), 4);
    assert_eq!(c1.class_counts, vec![25; 4]);
    assert!(p0.mean > 0.0 && p1.mean > 0.0);
}

#[test]
fn report_pipeline_writes_tables_and_charts() {
    let files = report::run_example().unwrap();
    let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for expected in ["report.md", "accuracy.csv", "training.csv", "ood.csv", "compactness.csv", "compactness.svg"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
}
