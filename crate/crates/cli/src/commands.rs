//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use hoi_core::check::{full_graph_gradcheck, layer_gradchecks, sweep_config, ToyProblem, GRAD_TOLERANCE};
use hoi_core::data::{BBox, CategorySpace};
use hoi_core::eval::{evaluate, gt_boxes, rare_groups, split_groups, EvalReport, ImageEval, Prediction, Setting};
use hoi_core::hico::{HoiTable, NUM_HOIS};
use hoi_core::model::{prepare_image, training_targets, Model};
use hoi_core::scoring::FocalConfig;
use hoi_core::splits::{self, count_hois, make_uc, rare_split, SplitKind, SplitSpec, UcVariant, UC_UNSEEN};
use hoi_core::synth::SynthDataset;
use hoi_core::train::{image_gradients, BatchRunner, ImageGrad, StepLog, TrainSample, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointConfig};
use crate::cli::{EvalArgs, PredictArgs, SelfcheckArgs, SettingArg, SplitArgs, SynthArgs, TrainArgs};
use crate::dataset::{self, read_counts, read_scores, read_split, write_jsonl, DataDir, ScoreLine, TripletRecord};
use crate::isaf::{self, IsafFile};

pub const THREADS_ENV: &str = "ISA_THREADS";
pub const CHECKPOINT_FILE: &str = "checkpoint.isaf";
pub const LOSS_FILE: &str = "loss.csv";

/// A problem with the invocation rather than the run; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Worker count from `ISA_THREADS`; one when unset.
pub fn threads() -> Result<usize> {
    Ok(match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => 1,
    })
}

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads()?).build()?)
}

/// Per-image gradients on the current rayon pool, collected in batch order.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParallelRunner;

impl BatchRunner for ParallelRunner {
    fn run(&self, model: &Model, batch: &[&TrainSample], focal: FocalConfig) -> hoi_core::Result<Vec<ImageGrad>> {
        batch.par_iter().map(|s| image_gradients(model, s, focal)).collect()
    }
}

/// Builds the split for `kind`; composition splits need per-HOI counts.
pub fn resolve_split(kind: SplitKind, table: &HoiTable, counts: &[u64], uc_target: Option<usize>) -> Result<SplitSpec> {
    let standard = table.len() == NUM_HOIS && table.num_objects() == hoi_core::hico::NUM_OBJECTS;
    match kind {
        SplitKind::NfUc | SplitKind::RfUc => {
            let target = match (uc_target, standard) {
                (Some(t), _) => t,
                (None, true) => UC_UNSEEN,
                (None, false) => bail!(usage("composition splits on a non-standard table need --uc-target")),
            };
            let variant = match kind {
                SplitKind::NfUc => UcVariant::NonRareFirst,
                _ => UcVariant::RareFirst,
            };
            Ok(make_uc(table, counts, variant, target)?)
        }
        SplitKind::Uo | SplitKind::Uv if !standard => {
            bail!(usage("unseen-object and unseen-verb splits are defined on the standard 600-category table"))
        }
        _ => Ok(splits::make_split(kind, table, Some(counts))?),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub images: usize,
    pub skipped: usize,
}

pub fn train(args: &TrainArgs) -> Result<TrainSummary> {
    let data = DataDir::open(&args.data, args.annotations.as_deref())?;
    let table = &data.table;
    let gts: Vec<_> = data.annotations.iter().map(|a| a.ground_truth()).collect();
    let split = match &args.split_file {
        Some(p) => read_split(p, table.len())?,
        None => {
            let counts = count_hois(table, gts.iter().flatten());
            resolve_split(args.split.into(), table, &counts, args.uc_target)?
        }
    };
    let space = if split.kind.is_zero_shot() || args.model.hoi_space {
        CategorySpace::Hois
    } else {
        CategorySpace::Verbs
    };
    let config = args.model.to_config(space);
    config.validate()?;
    if !(0.0..=1.0).contains(&args.lambda) {
        bail!(usage(format!("--lambda {} outside [0, 1]", args.lambda)));
    }
    let train_config = args.train_config();
    train_config.validate().map_err(|e| usage(e.to_string()))?;

    let object_text = data.object_text(config.dim)?;
    let class_text = data.class_text(space, config.dim)?;
    let mut model = Model::new(config, table, &object_text, &class_text, args.seed)?;

    let pool = thread_pool()?;
    let need_clip = model.config.needs_clip();
    let prepared: Vec<Option<TrainSample>> = pool.install(|| {
        data.annotations
            .par_iter()
            .zip(gts.par_iter())
            .map(|(ann, gt)| -> Result<Option<TrainSample>> {
                let det = data.detection(ann, model.config.dim)?;
                let clip = data.clip(ann, model.config.dim, need_clip)?;
                let Some(image) = prepare_image(&det, clip.as_ref(), table, &model.config)
                    .with_context(|| format!("preparing image {}", ann.image_id))?
                else {
                    return Ok(None);
                };
                let (labels, mask) = training_targets(&image, gt, table, space, Some(&split));
                Ok(Some(TrainSample { image, labels, mask }))
            })
            .collect::<Result<_>>()
    })?;
    let skipped = prepared.iter().filter(|s| s.is_none()).count();
    let samples: Vec<TrainSample> = prepared.into_iter().flatten().collect();
    if samples.is_empty() {
        bail!("no training image has a human-object pair");
    }

    let mut trainer = Trainer::new(&model, train_config.clone())?;
    fs::create_dir_all(&args.out)?;
    let loss_path = args.out.join(LOSS_FILE);
    let mut loss_file = fs::File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    writeln!(loss_file, "step,epoch,lr,loss")?;
    let mut last: Option<StepLog> = None;
    while trainer.epoch < train_config.epochs && !args.max_steps.is_some_and(|m| trainer.step >= m) {
        let logs = pool.install(|| trainer.train_epoch(&mut model, &samples, &ParallelRunner, args.max_steps))?;
        for l in &logs {
            writeln!(loss_file, "{},{},{},{}", l.step, l.epoch, l.lr, l.loss)?;
        }
        last = logs.last().copied().or(last);
    }
    loss_file.flush()?;

    let ck = CheckpointConfig {
        model: model.config.clone(),
        train: train_config,
        num_objects: table.num_objects(),
        num_columns: model.num_columns(),
        lambda: args.lambda,
        split: split.kind.is_zero_shot().then_some(split),
    };
    checkpoint::save(&args.out.join(CHECKPOINT_FILE), &model, &ck)?;
    Ok(TrainSummary {
        steps: trainer.step,
        epochs: trainer.epoch,
        final_loss: last.map_or(f64::NAN, |l| l.loss),
        images: samples.len(),
        skipped,
    })
}

pub fn predict(args: &PredictArgs) -> Result<usize> {
    let (model, ck) = checkpoint::load(&args.checkpoint)?;
    let data = DataDir::open(&args.data, args.annotations.as_deref())?;
    let table = &data.table;
    if table.num_objects() != ck.num_objects || model.config.space.columns(table) != ck.num_columns {
        bail!(
            "checkpoint expects {} objects and {} classes, data has {} and {}",
            ck.num_objects,
            ck.num_columns,
            table.num_objects(),
            model.config.space.columns(table)
        );
    }
    let lambda = args.lambda.unwrap_or(ck.lambda);
    if !(0.0..=1.0).contains(&lambda) {
        bail!(usage(format!("--lambda {lambda} outside [0, 1]")));
    }
    let need_clip = model.config.needs_clip();
    let pool = thread_pool()?;
    let lines: Vec<ScoreLine> = pool.install(|| {
        data.annotations
            .par_iter()
            .map(|ann| -> Result<ScoreLine> {
                let det = data.detection(ann, model.config.dim)?;
                let clip = data.clip(ann, model.config.dim, need_clip)?;
                let triplets = match prepare_image(&det, clip.as_ref(), table, &model.config)? {
                    Some(img) => model.predict(&img, table, lambda, args.top_k)?,
                    None => Vec::new(),
                };
                Ok(ScoreLine {
                    image_id: ann.image_id.clone(),
                    triplets: triplets.iter().map(TripletRecord::from).collect(),
                })
            })
            .collect::<Result<_>>()
    })?;
    write_jsonl(&args.out, &lines)?;
    Ok(lines.iter().map(|l| l.triplets.len()).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub reports: Vec<EvalReport>,
}

/// Aligned text table: one row per setting, one column per aggregate.
pub fn format_reports(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let _ = write!(out, "{:<14}", "setting");
    for (name, _) in &first.aggregates {
        let _ = write!(out, "{name:>10}");
    }
    out.push('\n');
    for r in reports {
        let setting = match r.setting {
            Setting::Default => "default",
            Setting::KnownObjects => "known-objects",
        };
        let _ = write!(out, "{setting:<14}");
        for (_, v) in &r.aggregates {
            match v {
                Some(v) => {
                    let _ = write!(out, "{v:>10.2}");
                }
                None => {
                    let _ = write!(out, "{:>10}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn eval(args: &EvalArgs) -> Result<EvalOutput> {
    if !args.scores.exists() {
        bail!(usage(format!("score file {} does not exist", args.scores.display())));
    }
    let data = DataDir::open(&args.data, args.annotations.as_deref())?;
    let table = &data.table;
    let scores = read_scores(&args.scores)?;
    let mut by_id = std::collections::HashMap::with_capacity(scores.len());
    for line in &scores {
        if by_id.insert(line.image_id.as_str(), line).is_some() {
            bail!("image {} appears twice in the score file", line.image_id);
        }
    }
    let mut images = Vec::with_capacity(data.annotations.len());
    let mut used = 0;
    for ann in &data.annotations {
        let predictions = match by_id.get(ann.image_id.as_str()) {
            Some(line) => {
                used += 1;
                line.triplets
                    .iter()
                    .map(|t| {
                        if t.hoi >= table.len() {
                            return Err(anyhow!("HOI id {} in scores is outside the table", t.hoi));
                        }
                        Ok(Prediction {
                            hoi: t.hoi,
                            human: BBox::from_array(t.human),
                            object: BBox::from_array(t.object),
                            score: t.score,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        images.push(ImageEval {
            predictions,
            ground_truth: gt_boxes(table, &ann.ground_truth()),
        });
    }
    if used != scores.len() {
        bail!("{} scored images are not in the annotations", scores.len() - used);
    }

    let counts = match (&args.counts, &args.train_annotations) {
        (Some(p), _) => Some(read_counts(p)?),
        (None, Some(p)) => {
            let anns = dataset::read_annotations(p)?;
            Some(count_hois(table, anns.iter().flat_map(|a| a.ground_truth())))
        }
        (None, None) => None,
    };
    let mut groups = Vec::new();
    if let Some(p) = &args.split_file {
        groups.extend(split_groups(&read_split(p, table.len())?));
    }
    if let Some(counts) = counts {
        let (rare, _) = rare_split(&counts, table.len())?;
        groups.extend(rare_groups(&rare, table.len()));
    }
    let settings: &[Setting] = match args.setting {
        SettingArg::Default => &[Setting::Default],
        SettingArg::KnownObjects => &[Setting::KnownObjects],
        SettingArg::Both => &[Setting::Default, Setting::KnownObjects],
    };
    let reports = settings.iter().map(|&s| evaluate(&images, table, s, &groups)).collect();
    let out = EvalOutput { reports };
    if let Some(p) = &args.out {
        fs::write(p, serde_json::to_string_pretty(&out)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(out)
}

pub fn split(args: &SplitArgs) -> Result<SplitSpec> {
    let data = match &args.data {
        Some(d) => Some(DataDir::open(d, None)?),
        None => None,
    };
    let table = match (&args.table, &data) {
        (Some(p), _) => dataset::read_table(p)?,
        (None, Some(d)) => d.table.clone(),
        (None, None) => HoiTable::hico(),
    };
    let kind: SplitKind = args.kind.into();
    let counts = match (&args.counts, &data) {
        (Some(p), _) => read_counts(p)?,
        (None, Some(d)) => count_hois(&table, d.annotations.iter().flat_map(|a| a.ground_truth())),
        (None, None) => {
            if matches!(kind, SplitKind::NfUc | SplitKind::RfUc) {
                eprintln!("warning: no training counts given; composition order falls back to HOI id");
            }
            vec![0; table.len()]
        }
    };
    let spec = resolve_split(kind, &table, &counts, args.uc_target)?;
    dataset::write_split(&args.out, &spec)?;
    Ok(spec)
}

/// One line of `selfcheck` output.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn selfcheck(args: &SelfcheckArgs) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    for (name, r) in layer_gradchecks(args.dim, args.seed)? {
        lines.push(CheckLine {
            name: format!("gradient {name}"),
            passed: r.max_rel_err < GRAD_TOLERANCE,
            detail: format!("max rel err {:.2e} at {} ({} checked)", r.max_rel_err, r.worst_param, r.checked),
        });
    }
    let r = full_graph_gradcheck(sweep_config(args.dim), args.seed)?;
    lines.push(CheckLine {
        name: "gradient full model + focal loss".into(),
        passed: r.max_rel_err < GRAD_TOLERANCE,
        detail: format!("max rel err {:.2e} at {} ({} checked)", r.max_rel_err, r.worst_param, r.checked),
    });

    let toy = ToyProblem::new(args.dim, args.seed);
    let files = [
        ("detection", isaf::detection_to_isaf(&toy.detection)),
        ("clip", isaf::clip_to_isaf(&toy.clip)),
        ("embedding", isaf::embedding_to_isaf(&toy.verb_text)),
    ];
    for (name, file) in files {
        let bytes = file.encode()?;
        let decoded = IsafFile::decode(&bytes)?;
        let again = match name {
            "detection" => isaf::detection_to_isaf(&isaf::detection_from_isaf(&decoded, args.dim)?),
            "clip" => isaf::clip_to_isaf(&isaf::clip_from_isaf(&decoded, args.dim)?),
            _ => isaf::embedding_to_isaf(&isaf::embedding_from_isaf(&decoded, args.dim)?),
        };
        lines.push(CheckLine {
            name: format!("round trip {name} fixture"),
            passed: again.encode()? == bytes,
            detail: format!("{} bytes", bytes.len()),
        });
    }
    Ok(lines)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let data = SynthDataset::new(args.dim, args.seed);
    dataset::write_synth(&data, &args.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uc_on_standard_table_without_counts() {
        let s = resolve_split(SplitKind::NfUc, &HoiTable::hico(), &[0; 600], None).unwrap();
        assert_eq!((s.unseen.len(), s.seen.len()), (120, 480));
    }

    #[test]
    fn uo_needs_standard_table() {
        let t = SynthDataset::new(4, 0).table;
        let e = resolve_split(SplitKind::Uo, &t, &[0; 7], None).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        let s = resolve_split(SplitKind::NfUc, &t, &[5, 4, 3, 2, 1, 1, 1], Some(2)).unwrap();
        assert_eq!(s.unseen.len(), 2);
    }

    #[test]
    fn report_table_alignment() {
        let r = EvalReport {
            setting: Setting::Default,
            per_category: vec![],
            num_gt: vec![],
            aggregates: vec![("full".into(), Some(12.345)), ("rare".into(), None)],
        };
        let text = format_reports(&[r]);
        assert_eq!(text, "setting             full      rare\ndefault            12.35         -\n");
    }
}
