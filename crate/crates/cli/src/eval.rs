use std::fmt::Write as _;

use actassign::evalmap::{mean_average_precision, EvalReport};
use actassign::io::{csv_to_records, read_class_table, read_detection_csv, CsvKind};
use actassign::Error;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{pretty_json, read_file, read_text, write_output};
use crate::EvalArgs;

#[derive(Debug, Serialize)]
struct JsonReport<'a> {
    class_names: Option<&'a [String]>,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn text_report(report: &EvalReport, names: Option<&[String]>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:<24} {:>6} {:>8}  AP",
        "class", "name", "gt", "preds"
    );
    for c in &report.classes {
        let name = names
            .and_then(|n| n.get(c.class_id))
            .map_or("-", String::as_str);
        let ap =
            c.ap.map_or_else(|| "n/a".to_string(), |ap| format!("{ap:.6}"));
        let _ = writeln!(
            out,
            "{:>5}  {:<24} {:>6} {:>8}  {ap}",
            c.class_id, name, c.gt_count, c.prediction_count
        );
    }
    let _ = writeln!(
        out,
        "mAP@{} = {:.6} over {} classes",
        report.iou_threshold,
        report.map,
        report.evaluated_classes()
    );
    out
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    if !(args.iou > 0.0 && args.iou <= 1.0) {
        return Err(CliError::usage(format!(
            "--iou must be in (0, 1], got {}",
            args.iou
        )));
    }
    let preds = read_detection_csv(read_file(&args.pred)?.as_slice(), CsvKind::Predictions)
        .map_err(|e| prefix(e, &args.pred))?;
    let gts = read_detection_csv(read_file(&args.gt)?.as_slice(), CsvKind::GroundTruth)
        .map_err(|e| prefix(e, &args.gt))?;

    let names = args
        .classes
        .as_deref()
        .map(read_text)
        .transpose()?
        .map(|t| read_class_table(&t));
    if let Some(path) = &args.pred_classes {
        let pred_names = read_class_table(&read_text(path)?);
        match &names {
            Some(gt_names) if *gt_names != pred_names => {
                let detail = match gt_names.iter().zip(&pred_names).position(|(a, b)| a != b) {
                    Some(i) => format!(
                        "class {i} is `{}` in the ground truth but `{}` in the predictions",
                        gt_names[i], pred_names[i]
                    ),
                    None => format!(
                        "ground truth lists {} classes, predictions {}",
                        gt_names.len(),
                        pred_names.len()
                    ),
                };
                return Err(Error::ClassTableMismatch(detail).into());
            }
            Some(_) => {}
            None => return Err(CliError::usage("--pred-classes requires --classes")),
        }
    }
    let class_count = match (&names, args.num_classes) {
        (Some(n), Some(k)) if n.len() != k => {
            return Err(Error::ClassTableMismatch(format!(
                "--num-classes {k} but the class table lists {} names",
                n.len()
            ))
            .into())
        }
        (Some(n), _) => n.len(),
        (None, Some(k)) => k,
        (None, None) => preds
            .iter()
            .chain(&gts)
            .map(|r| r.class_id + 1)
            .max()
            .unwrap_or(0),
    };

    let (p, g) = csv_to_records(&preds, &gts);
    let report = mean_average_precision(&p, &g, class_count, args.iou)?;
    let text = if args.json {
        pretty_json(&JsonReport {
            class_names: names.as_deref(),
            report: &report,
        })
    } else {
        text_report(&report, names.as_deref())
    };
    write_output(args.output.as_ref(), text.as_bytes())
}

fn prefix(e: Error, path: &std::path::Path) -> Error {
    match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    }
}
