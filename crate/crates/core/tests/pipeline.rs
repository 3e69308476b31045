use actassign::io::{
    csv_to_records, document_from_clips, parse_clip_file, read_detection_csv, serialize_clip_file,
    CsvKind,
};
use actassign::losses::{combined_loss, DEFAULT_ALPHA};
use actassign::powerset::{score_actor_subsets, DEFAULT_POWERSET_CAP};
use actassign::solver::{brute_force_assignment, solve_assignment, DEFAULT_SOLVER_CAP};
use actassign::{mean_average_precision, ActionSubset, LabelSet};
use approx::assert_abs_diff_eq;
use ndarray::array;

const SCENE: &str = include_str!("../../cli/tests/fixtures/conversation.json");

#[test]
fn two_actor_scene_covers_every_label_and_matches_brute_force() {
    let parsed = parse_clip_file(SCENE.as_bytes(), true).unwrap();
    let clip = &parsed.clips[0];
    let labels = &clip.annotation.labels;
    assert_eq!(labels.len(), 4);
    let frame = &clip.frames[0];
    let tables: Vec<_> = frame
        .actors
        .iter()
        .map(|a| score_actor_subsets(a, labels, DEFAULT_POWERSET_CAP).unwrap())
        .collect();
    // |Omega| = 16 including the empty set, so 15 scored subsets per actor
    assert!(tables.iter().all(|t| t.entries.len() == 15));

    let dp = solve_assignment(&tables, labels, DEFAULT_SOLVER_CAP).unwrap();
    let oracle = brute_force_assignment(&tables, labels).unwrap();
    assert_eq!(dp, oracle);
    assert!(dp.feasible);
    assert!(dp.satisfies_constraints(labels, 2));
    let union = dp
        .subsets()
        .iter()
        .fold(ActionSubset::EMPTY, |a, s| a.union(*s));
    assert_eq!(union, labels.as_subset());
}

#[test]
fn parsed_file_survives_serialisation() {
    let parsed = parse_clip_file(SCENE.as_bytes(), true).unwrap();
    let text = serialize_clip_file(&document_from_clips(
        parsed.units,
        &parsed.class_names,
        &parsed.clips,
    ));
    let again = parse_clip_file(text.as_bytes(), true).unwrap();
    assert_eq!(again, parsed);
}

#[test]
fn loss_examples_compose() {
    // MIML bag of two actors and an association target for a single actor;
    // the published combined value comes from the rounded parts
    let y = [true, false];
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let bag = array![[logit(0.8), logit(0.4)], [logit(0.6), logit(0.2)]];
    let miml_only = combined_loss(&y, bag.view(), None, DEFAULT_ALPHA).unwrap();
    assert_abs_diff_eq!(miml_only.miml, 0.36699, epsilon = 1e-5);
    assert_eq!(miml_only.combined, miml_only.miml);

    let single = array![[logit(0.9), logit(0.1)]];
    let assigned = [ActionSubset::from_classes([0])];
    let both = combined_loss(
        &[true, false],
        single.view(),
        Some(&assigned),
        DEFAULT_ALPHA,
    )
    .unwrap();
    assert_abs_diff_eq!(both.association, 0.10536, epsilon = 1e-5);
    assert_abs_diff_eq!(
        both.combined,
        both.miml + 0.3 * both.association,
        epsilon = 1e-15
    );
}

#[test]
fn csv_ground_truth_as_predictions_scores_one() {
    let gt = "vid,0902,0.1,0.1,0.3,0.5,0,17\nvid,0902,0.5,0.2,0.9,0.9,2,18\nvid,0903,0.1,0.1,0.3,0.5,1\n";
    let gt_rows = read_detection_csv(gt.as_bytes(), CsvKind::GroundTruth).unwrap();
    let pred: String = gt
        .lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').take(7).collect();
            format!("{},1.0\n", cols.join(","))
        })
        .collect();
    let pred_rows = read_detection_csv(pred.as_bytes(), CsvKind::Predictions).unwrap();
    let (p, g) = csv_to_records(&pred_rows, &gt_rows);
    let report = mean_average_precision(&p, &g, 3, 0.5).unwrap();
    assert_eq!(report.map, 1.0);
    assert_eq!(report.evaluated_classes(), 3);
}

#[test]
fn labels_reject_out_of_range_classes_across_modules() {
    let bad = SCENE.replace("\"labels\": [0, 1, 2, 3]", "\"labels\": [0, 1, 2, 5]");
    let err = parse_clip_file(bad.as_bytes(), true).unwrap_err();
    assert_eq!(err.code(), "E_INVALID");
    assert!(err.to_string().contains("label index out of range"));
    assert_eq!(LabelSet::new([3, 1, 3]).classes(), &[1, 3]);
}
