use actassign::io::{parse_clip_file, ParsedClips};
use actassign::powerset::{log_normalizer, score_actor_subsets, subset_log_numerator};
use actassign::solver::{assign_without_lp, associate_frame};
use actassign::{ActionSubset, Clip, Frame, LabelSet, SubsetScoreTable};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{pretty_json, read_file, write_output};
use crate::{AssignArgs, ReportFormat, ScoreArgs};

fn load(path: &std::path::Path, strict: bool) -> CliResult<ParsedClips> {
    let bytes = read_file(path)?;
    let parsed = parse_clip_file(&bytes, strict)?;
    for w in &parsed.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(parsed)
}

#[derive(Debug, Serialize)]
struct ActorAssignment {
    actor_id: u64,
    classes: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct FrameReport {
    clip_id: String,
    frame_id: u64,
    feasible: bool,
    /// Whether the union of the assigned subsets equals the clip label set.
    covers_labels: bool,
    objective: f64,
    assignments: Vec<ActorAssignment>,
}

#[derive(Debug, Serialize)]
struct Summary {
    frames: usize,
    feasible: usize,
    infeasible: usize,
    skipped: usize,
}

#[derive(Debug, Serialize)]
struct AssignReport {
    method: &'static str,
    classes: Vec<String>,
    frames: Vec<FrameReport>,
    summary: Summary,
}

/// Sum of subset probabilities for the thresholded baseline; empty subsets contribute nothing.
fn baseline_objective(
    frame: &Frame,
    labels: &LabelSet,
    subsets: &[ActionSubset],
) -> actassign::Result<f64> {
    let mut total = 0.0;
    for (a, s) in frame.actors.iter().zip(subsets) {
        if s.is_empty() {
            continue;
        }
        let z = log_normalizer(&a.logits, labels)?;
        total += a.confidence * (subset_log_numerator(*s, &a.logits)? - z).exp();
    }
    Ok(total)
}

fn assign_frame(clip: &Clip, frame: &Frame, args: &AssignArgs) -> actassign::Result<FrameReport> {
    let labels = &clip.annotation.labels;
    let target = labels.as_subset();
    let (feasible, objective, subsets) = if args.no_lp {
        let logits: Vec<&[f64]> = frame.actors.iter().map(|a| a.logits.as_slice()).collect();
        let subsets = assign_without_lp(&logits, labels)?;
        let feasible = labels.is_empty() || !frame.actors.is_empty();
        let objective = baseline_objective(frame, labels, &subsets)?;
        (feasible, objective, subsets)
    } else {
        let r = associate_frame(
            &frame.actors,
            labels,
            args.caps.powerset_cap,
            args.caps.solver_cap,
        )?;
        let subsets = if r.feasible && labels.is_empty() {
            vec![ActionSubset::EMPTY; frame.actors.len()]
        } else {
            r.subsets()
        };
        (r.feasible, r.objective, subsets)
    };
    let covered = subsets
        .iter()
        .fold(ActionSubset::EMPTY, |acc, s| acc.union(*s));
    Ok(FrameReport {
        clip_id: clip.annotation.clip_id.clone(),
        frame_id: frame.frame_id,
        feasible,
        covers_labels: feasible && covered == target,
        objective,
        assignments: frame
            .actors
            .iter()
            .zip(&subsets)
            .map(|(a, s)| ActorAssignment {
                actor_id: a.actor_id,
                classes: s.classes().collect(),
            })
            .collect(),
    })
}

fn csv_report(report: &AssignReport) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::from(actassign::Error::Io(e.to_string()));
    w.write_record([
        "clip_id",
        "frame_id",
        "actor_id",
        "classes",
        "objective",
        "feasible",
    ])
    .map_err(io)?;
    for f in &report.frames {
        let frame_id = f.frame_id.to_string();
        let objective = f.objective.to_string();
        let feasible = f.feasible.to_string();
        if f.assignments.is_empty() {
            w.write_record([f.clip_id.as_str(), &frame_id, "", "", &objective, &feasible])
                .map_err(io)?;
        }
        for a in &f.assignments {
            let classes: Vec<String> = a.classes.iter().map(usize::to_string).collect();
            w.write_record([
                f.clip_id.as_str(),
                &frame_id,
                &a.actor_id.to_string(),
                &classes.join(";"),
                &objective,
                &feasible,
            ])
            .map_err(io)?;
        }
    }
    w.into_inner()
        .map_err(|e| CliError::from(actassign::Error::Io(e.to_string())))
}

fn pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::usage(format!("cannot start worker pool: {e}")))
}

pub fn run_assign(args: &AssignArgs) -> CliResult<()> {
    let parsed = load(&args.input, args.strict)?;
    // clips are solved in parallel; collecting keeps the input order
    let per_clip: Vec<actassign::Result<Vec<FrameReport>>> = pool(args.workers)?.install(|| {
        parsed
            .clips
            .par_iter()
            .map(|clip| {
                clip.frames
                    .iter()
                    .map(|f| assign_frame(clip, f, args))
                    .collect()
            })
            .collect()
    });
    let mut frames = Vec::new();
    for r in per_clip {
        frames.extend(r?);
    }

    let total = frames.len();
    let infeasible: Vec<String> = frames
        .iter()
        .filter(|f| !f.feasible)
        .map(|f| format!("clip `{}` frame {}", f.clip_id, f.frame_id))
        .collect();
    let mut skipped = 0;
    if args.skip_infeasible {
        for what in &infeasible {
            log::warn!("skipping infeasible {what}");
        }
        skipped = infeasible.len();
        frames.retain(|f| f.feasible);
    }
    let report = AssignReport {
        method: if args.no_lp { "no-lp" } else { "lp" },
        classes: parsed.class_names,
        summary: Summary {
            frames: total,
            feasible: total - infeasible.len(),
            infeasible: infeasible.len(),
            skipped,
        },
        frames,
    };
    let bytes = match args.report {
        ReportFormat::Json => pretty_json(&report).into_bytes(),
        ReportFormat::Csv => csv_report(&report)?,
    };
    write_output(args.output.as_ref(), &bytes)?;
    if !args.skip_infeasible && !infeasible.is_empty() {
        return Err(CliError::infeasible(format!(
            "{} infeasible frame(s), first: {}",
            infeasible.len(),
            infeasible[0]
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FrameTables {
    frame_id: u64,
    actors: Vec<SubsetScoreTable>,
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    clip_id: String,
    labels: Vec<usize>,
    frames: Vec<FrameTables>,
}

pub fn run_score(args: &ScoreArgs) -> CliResult<()> {
    let parsed = load(&args.input, args.strict)?;
    let clip = match &args.clip {
        Some(id) => parsed
            .clips
            .iter()
            .find(|c| &c.annotation.clip_id == id)
            .ok_or_else(|| {
                CliError::usage(format!("no clip `{id}` in {}", args.input.display()))
            })?,
        None if parsed.clips.len() == 1 => &parsed.clips[0],
        None => {
            return Err(CliError::usage(format!(
                "{} holds {} clips; choose one with --clip",
                args.input.display(),
                parsed.clips.len()
            )))
        }
    };
    let labels = &clip.annotation.labels;
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let actors = f
                .actors
                .iter()
                .map(|a| score_actor_subsets(a, labels, args.powerset_cap))
                .collect::<actassign::Result<Vec<_>>>()?;
            Ok(FrameTables {
                frame_id: f.frame_id,
                actors,
            })
        })
        .collect::<actassign::Result<Vec<_>>>()?;
    let report = ScoreReport {
        clip_id: clip.annotation.clip_id.clone(),
        labels: labels.classes().to_vec(),
        frames,
    };
    write_output(args.output.as_ref(), pretty_json(&report).as_bytes())
}
