//! Accuracy metrics, run reports, the naive fine-tuning baseline and the
//! desk-scale benchmark.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{generate_dataset, random_template, ClassTemplate, Jitter, TemplateConfig};
use crate::cil_engine::{score, CilConfig, InferenceRule, StreamResult};
use crate::dataset_io::{make_task_stream, Dataset, Manifest, Split, TaskStream};
use crate::encoder::{Backbone, Classifier, EncoderConfig};
use crate::error::{config_err, param_err, Error, Result};
use crate::geometry::{build_shape_pool, PoolConfig, ShapePool};
use crate::numerics::{ParamStore, Sgd, Tape};
use crate::pointops::PatchSet;
use crate::rng;
use crate::tokenizer_pretrain::Pretrained;

pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return param_err(format!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    let ok = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ok as f64 / labels.len() as f64)
}

/// Settings echoed into a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub seed: u64,
    pub exemplars: usize,
    pub increment: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub l2_weight: f64,
    pub inference: InferenceRule,
    pub encoder: EncoderConfig,
}

impl ReportConfig {
    pub fn new(cfg: &CilConfig, increment: usize, encoder: &EncoderConfig) -> Self {
        Self {
            seed: cfg.seed,
            exemplars: cfg.exemplars,
            increment,
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            tau: cfg.tau,
            l2_weight: cfg.l2_weight,
            inference: cfg.inference,
            encoder: encoder.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: usize,
    pub classes: Vec<u32>,
    /// Classes seen after this task.
    pub seen_classes: usize,
    pub accuracy: f64,
    pub per_task: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latest_stack_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub config: ReportConfig,
    pub stream_hash: String,
    pub tasks: Vec<TaskRow>,
    /// Accuracy after the last task.
    pub last_accuracy: f64,
    /// Mean of the per-task accuracies.
    pub average_accuracy: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn summarize(method: &str, config: ReportConfig, stream_hash: String, tasks: Vec<TaskRow>) -> Result<RunReport> {
    let Some(last) = tasks.last() else {
        return config_err("a report needs at least one evaluated task");
    };
    let accs: Vec<f64> = tasks.iter().map(|t| t.accuracy).collect();
    Ok(RunReport {
        method: method.to_string(),
        config,
        stream_hash,
        last_accuracy: last.accuracy,
        average_accuracy: mean(&accs),
        tasks,
    })
}

pub fn rows_from_stream(result: &StreamResult) -> Vec<TaskRow> {
    let mut seen = 0;
    result
        .logs
        .iter()
        .map(|l| {
            seen += l.classes.len();
            TaskRow {
                task: l.task,
                classes: l.classes.clone(),
                seen_classes: seen,
                accuracy: l.accuracy,
                per_task: l.per_task.clone(),
                latest_stack_accuracy: l.latest_stack_accuracy,
                seconds: l.seconds,
            }
        })
        .collect()
}

impl RunReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.accuracy).collect()
    }

    /// Accuracy on task 0's test data after each stage.
    pub fn first_task_curve(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.per_task[0]).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(s)?;
        if r.tasks.is_empty() || r.tasks.iter().any(|t| !(0.0..=1.0).contains(&t.accuracy)) {
            return Err(Error::Protocol("report has no tasks or an accuracy outside [0, 1]".into()));
        }
        Ok(r)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,classes,accuracy,seconds\n");
        for t in &self.tasks {
            writeln!(s, "{},{},{},{}", t.task, t.seen_classes, t.accuracy, t.seconds).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        std::fs::write(path.with_extension("csv"), self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Accuracy-vs-task chart, one polyline per report.
pub fn render_svg(reports: &[RunReport]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let n = reports.iter().map(|r| r.tasks.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| m + (w - 2.0 * m) * i as f64 / (n - 1) as f64;
    let y = |a: f64| h - m - (h - 2.0 * m) * a;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<g stroke="black" fill="none"><line x1="{m}" y1="{}" x2="{}" y2="{}"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}"/></g>"#, h - m, w - m, h - m, h - m).unwrap();
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{:.2}</text>"#, m - 6.0, y(a) + 4.0, a).unwrap();
    }
    for i in 0..n {
        writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, x(i), h - m + 16.0, i + 1).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">task</text>"#, w / 2.0, h - 12.0).unwrap();
    for (k, r) in reports.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = r.tasks.iter().enumerate().map(|(i, t)| format!("{:.2},{:.2}", x(i), y(t.accuracy))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
        for p in &pts {
            let (px, py) = p.split_once(',').unwrap();
            writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#).unwrap();
        }
        let ly = m + 16.0 * k as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - m - 150.0, w - m - 130.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, w - m - 125.0, ly + 4.0, xml_escape(&r.method)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Fine-tunes the whole pre-trained backbone task by task with only the
/// classifier loss: no adapters, prototypes or exemplars.
pub fn naive_baseline(
    pretrained: &Pretrained, encoder: &EncoderConfig, train: &Dataset, test: &Dataset, train_sets: &[PatchSet],
    test_sets: &[PatchSet], stream: &TaskStream, cfg: &CilConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let backbone = pretrained.backbone(&mut store, encoder)?;
    let mut classifier = Classifier::default();
    let mut rows = Vec::with_capacity(stream.tasks.len());
    let mut seen = 0;
    for (t, task) in stream.tasks.iter().enumerate() {
        let t0 = Instant::now();
        let mut r = rng::rng_at(cfg.seed, &[20, t as u64]);
        classifier.grow(&mut store, encoder.dim, t, &task.classes, &mut r)?;
        let bs = cfg.batch_size.min(task.train.len()).max(1);
        let mut sgd = Sgd::new(cfg.lr);
        for epoch in 0..cfg.epochs {
            let mut order = task.train.clone();
            rng::shuffle(&mut rng::rng_at(cfg.seed, &[21, t as u64, epoch as u64]), &mut order);
            for chunk in order.chunks(bs) {
                let sets: Vec<&PatchSet> = chunk.iter().map(|&i| &train_sets[i]).collect();
                let cols: Vec<usize> = chunk
                    .iter()
                    .map(|&i| classifier.column_of(train.labels[i]).expect("current class has a column"))
                    .collect();
                let mut tape = Tape::new();
                let enc = backbone.forward(&mut tape, &store, &sets, &[])?;
                let logits = classifier.logits(&mut tape, &store, enc.cls)?;
                let loss = tape.cross_entropy(logits, &cols)?;
                if !tape.value(loss).item().is_finite() {
                    return Err(Error::NonFinite(format!("baseline loss at task {t}, epoch {epoch}")));
                }
                let g = tape.backward(loss)?;
                store.accumulate(&g);
                sgd.step(&mut store)?;
            }
        }
        let classes = classifier.classes();
        let predict = |idx: &[usize]| -> Result<Vec<u32>> {
            let chunks: Vec<Vec<u32>> = idx
                .par_chunks(crate::cil_engine::EVAL_CHUNK)
                .map(|chunk| {
                    let sets: Vec<&PatchSet> = chunk.iter().map(|&i| &test_sets[i]).collect();
                    let mut tape = Tape::new();
                    let enc = backbone.forward(&mut tape, &store, &sets, &[])?;
                    let logits = classifier.logits(&mut tape, &store, enc.cls)?;
                    let lg = tape.value(logits);
                    Ok((0..chunk.len())
                        .map(|r| {
                            let row = lg.row(r);
                            let mut best = 0;
                            for (j, &v) in row.iter().enumerate() {
                                if v > row[best] {
                                    best = j;
                                }
                            }
                            classes[best]
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            Ok(chunks.into_iter().flatten().collect())
        };
        let (acc, per_task, _) = score(predict, test, &stream.tasks[..=t])?;
        seen += task.classes.len();
        rows.push(TaskRow {
            task: t,
            classes: task.classes.clone(),
            seen_classes: seen,
            accuracy: acc,
            per_task,
            latest_stack_accuracy: None,
            seconds: t0.elapsed().as_secs_f64(),
        });
        log::info!("baseline task {t}: accuracy {acc:.4}");
    }
    let increment = stream.tasks.first().map_or(0, |t| t.classes.len());
    let mut config = ReportConfig::new(cfg, increment, encoder);
    config.exemplars = 0;
    config.inference = InferenceRule::Classifier;
    summarize("naive-finetune", config, stream.content_hash(train, test), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub pretrain_templates: usize,
    pub pretrain_samples: usize,
    pub holdout_templates: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub increment: usize,
    pub templates: TemplateConfig,
    /// Per-sample jitter of the held-out classes; wider than the pre-training
    /// jitter so frozen features alone do not separate them.
    pub holdout_jitter: Jitter,
    pub pool: PoolConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            pretrain_templates: 60,
            pretrain_samples: 200,
            holdout_templates: 12,
            train_per_class: 80,
            test_per_class: 40,
            points: 1024,
            increment: 3,
            templates: TemplateConfig::default(),
            holdout_jitter: Jitter { rotation_deg: 45.0, translation: 0.15, scale: 0.3 },
            pool: PoolConfig::default(),
        }
    }
}

pub struct DeskBenchmark {
    pub pool: ShapePool,
    pub pretrain_templates: Vec<ClassTemplate>,
    pub holdout_templates: Vec<ClassTemplate>,
    pub pretrain: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub stream: TaskStream,
}

fn relabel(set: crate::assembly::GeneratedSet, ids: &[u32], name: &str, split: Split) -> Result<Dataset> {
    let labels = set
        .labels
        .iter()
        .map(|l| ids.iter().position(|i| i == l).map(|p| p as u32))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Config("generated label outside the template list".into()))?;
    let manifest = Manifest {
        name: name.to_string(),
        class_count: ids.len(),
        class_names: Some(ids.iter().map(|i| format!("template-{i}")).collect()),
        split,
        template_ids: Some(ids.to_vec()),
    };
    Dataset::from_clouds(manifest, &set.clouds, labels)
}

/// Pre-training set on templates `0..P` and a held-out incremental stream
/// on templates `P..P+H`, whose classes were never pre-trained on.
pub fn make_desk_benchmark(seed: u64, cfg: &DeskConfig) -> Result<DeskBenchmark> {
    let pool = build_shape_pool(&cfg.pool, rng::derive(seed, &[1]))?;
    let tseed = rng::derive(seed, &[2]);
    let p = cfg.pretrain_templates as u32;
    let h = cfg.holdout_templates as u32;
    let pretrain_templates: Vec<ClassTemplate> =
        (0..p).map(|id| random_template(id, &cfg.templates, tseed)).collect::<Result<_>>()?;
    let held = TemplateConfig { jitter: cfg.holdout_jitter, ..cfg.templates.clone() };
    let holdout_templates: Vec<ClassTemplate> =
        (p..p + h).map(|id| random_template(id, &held, tseed)).collect::<Result<_>>()?;
    let pre_ids: Vec<u32> = (0..p).collect();
    let hold_ids: Vec<u32> = (p..p + h).collect();
    let gen = generate_dataset(&pretrain_templates, &pool, cfg.pretrain_samples, cfg.points, rng::derive(seed, &[3]))?;
    let pretrain = relabel(gen, &pre_ids, "desk-pretrain", Split::Pretrain)?;
    let per = cfg.train_per_class + cfg.test_per_class;
    let gen = generate_dataset(&holdout_templates, &pool, per, cfg.points, rng::derive(seed, &[4]))?;
    let (mut tr, mut te) = (
        crate::assembly::GeneratedSet { clouds: vec![], labels: vec![] },
        crate::assembly::GeneratedSet { clouds: vec![], labels: vec![] },
    );
    for (i, (c, l)) in gen.clouds.into_iter().zip(gen.labels).enumerate() {
        let dst = if i % per < cfg.train_per_class { &mut tr } else { &mut te };
        dst.clouds.push(c);
        dst.labels.push(l);
    }
    let train = relabel(tr, &hold_ids, "desk-train", Split::Train)?;
    let test = relabel(te, &hold_ids, "desk-test", Split::Test)?;
    let stream = make_task_stream(&train, &test, cfg.increment, None, 1993)?;
    Ok(DeskBenchmark { pool, pretrain_templates, holdout_templates, pretrain, train, test, stream })
}

/// Convenience used by the CLI and acceptance runs.
pub fn backbone_from(pretrained: &Pretrained, encoder: &EncoderConfig) -> Result<(ParamStore<f32>, Backbone)> {
    let mut store = ParamStore::new();
    let bb = pretrained.backbone(&mut store, encoder)?;
    Ok((store, bb))
}
