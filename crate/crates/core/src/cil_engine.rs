//! Class-incremental training with per-task adapter stacks, prototype
//! memory and prototype updates across tasks.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{select_exemplars, Dataset, ExemplarStore, Task, TaskStream};
use crate::encoder::{AdapterStack, Backbone, Classifier, EncoderConfig};
use crate::error::{config_err, Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Sgd, Tape, Tensor, Var};
use crate::pointops::PatchSet;
use crate::rng;
use crate::tokenizer_pretrain::Pretrained;

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_BATCH: usize = 256;
/// Samples per forward pass when only embeddings are needed.
pub const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceRule {
    /// Cosine similarity to class prototypes.
    Prototype,
    /// Argmax of classifier logits.
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CilConfig {
    /// Exemplars kept per class; 0 runs exemplar-free.
    pub exemplars: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub ce_weight: f64,
    pub l2_weight: f64,
    pub seed: u64,
    pub inference: InferenceRule,
    /// Also score each stage with only the newest adapter stack active.
    pub eval_latest_stack_only: bool,
}

impl Default for CilConfig {
    fn default() -> Self {
        Self {
            exemplars: 0,
            epochs: 30,
            lr: 0.01,
            batch_size: DEFAULT_BATCH,
            tau: DEFAULT_TAU,
            ce_weight: 1.0,
            l2_weight: 1.0,
            seed: 1993,
            inference: InferenceRule::Prototype,
            eval_latest_stack_only: false,
        }
    }
}

impl CilConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return config_err(format!("mapping temperature must be > 0, got {}", self.tau));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return config_err(format!("invalid lr {} / batch size {}", self.lr, self.batch_size));
        }
        if self.ce_weight < 0.0 || self.l2_weight < 0.0 {
            return config_err("loss weights must be >= 0");
        }
        Ok(())
    }

    pub fn exemplar_free(&self) -> bool {
        self.exemplars == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub version: usize,
    pub vector: Vec<f64>,
}

/// Class label to its current prototype.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub entries: BTreeMap<u32, Prototype>,
}

impl PrototypeTable {
    pub fn get(&self, class: u32) -> Option<&[f64]> {
        self.entries.get(&class).map(|p| p.vector.as_slice())
    }

    pub fn set(&mut self, class: u32, version: usize, vector: Vec<f64>) {
        self.entries.insert(class, Prototype { version, vector });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn mean_embedding(rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = rows.first()?;
    let mut m = vec![0.0; first.len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    Some(m)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean embedding of each class's governing set.
pub fn compute_prototypes(
    groups: &BTreeMap<u32, Vec<usize>>, version: usize, embed: impl Fn(&[usize]) -> Result<Vec<Vec<f64>>>,
) -> Result<PrototypeTable> {
    let mut table = PrototypeTable::default();
    for (&c, idx) in groups {
        if idx.is_empty() {
            return Err(Error::Protocol(format!("class {c} has no samples to form a prototype")));
        }
        let rows = embed(idx)?;
        table.set(c, version, mean_embedding(&rows).expect("non-empty"));
    }
    Ok(table)
}

/// Softmax over `cos(p, q_k) / tau`.
pub fn mapping_weights(p: &[f64], q_old: &[&[f64]], tau: f64) -> Vec<f64> {
    let s: Vec<f64> = q_old.iter().map(|q| cosine(p, q) / tau).collect();
    let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Moves each old prototype by the weighted drift of the current classes
/// (`q_new - q_old`), weights from [`mapping_weights`].
pub fn semantic_map(
    old: &PrototypeTable, q_old: &PrototypeTable, q_new: &PrototypeTable, tau: f64, version: usize,
) -> Result<PrototypeTable> {
    let keys: Vec<u32> = q_old.entries.keys().copied().collect();
    if keys.is_empty() || keys.iter().any(|k| q_new.get(*k).is_none()) {
        return Err(Error::Protocol("current-class prototypes missing for semantic mapping".into()));
    }
    let qo: Vec<&[f64]> = keys.iter().map(|&k| q_old.get(k).unwrap()).collect();
    let qn: Vec<&[f64]> = keys.iter().map(|&k| q_new.get(k).unwrap()).collect();
    let mut out = PrototypeTable::default();
    for (&c, p) in &old.entries {
        let w = mapping_weights(&p.vector, &qo, tau);
        let mut v = p.vector.clone();
        for (k, wk) in w.iter().enumerate() {
            for j in 0..v.len() {
                v[j] += wk * (qn[k][j] - qo[k][j]);
            }
        }
        out.set(c, version, v);
    }
    Ok(out)
}

/// Label of the most cosine-similar prototype; ties go to the lower label.
pub fn predict_embedding(emb: &[f64], table: &PrototypeTable) -> Result<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (&c, p) in &table.entries {
        let s = cosine(emb, &p.vector);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::Protocol("prediction with an empty prototype table".into()))
}

/// L¹ + L² for one batch: cross-entropy of classifier logits plus mean
/// squared distance of the CLS embeddings to constant prototype targets.
#[allow(clippy::too_many_arguments)]
pub fn composed_loss<T: Real>(
    tape: &mut Tape<T>, store: &ParamStore<T>, backbone: &Backbone, stacks: &[&AdapterStack], classifier: &Classifier,
    tokens: Tensor<T>, columns: &[usize], targets: Tensor<T>, weights: (f64, f64),
) -> Result<(Var, Var, Var, Var)> {
    let batch = columns.len();
    let x = tape.constant(tokens);
    let enc = backbone.encode(tape, store, x, batch, stacks)?;
    let logits = classifier.logits(tape, store, enc.cls)?;
    let ce = tape.cross_entropy(logits, columns)?;
    let p = tape.constant(targets);
    let l2 = tape.squared_error(enc.cls, p)?;
    let a = tape.scale(ce, T::c(weights.0));
    let b = tape.scale(l2, T::c(weights.1));
    let loss = tape.add(a, b)?;
    Ok((loss, ce, l2, logits))
}

/// Pre-trained backbone, adapter stacks and classifier, all in one store.
pub struct CilModel {
    pub store: ParamStore<f32>,
    pub backbone: Backbone,
    pub stacks: Vec<AdapterStack>,
    pub classifier: Classifier,
}

impl CilModel {
    pub fn from_pretrained(p: &Pretrained, expected: &EncoderConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = p.backbone(&mut store, expected)?;
        Ok(Self::with_backbone(store, backbone))
    }

    /// Wraps a backbone already in `store`, freezing all of it.
    pub fn with_backbone(mut store: ParamStore<f32>, backbone: Backbone) -> Self {
        for id in backbone.ids() {
            store.set_trainable(id, false);
        }
        Self { store, backbone, stacks: Vec::new(), classifier: Classifier::default() }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.backbone.config
    }

    pub fn stack_refs(&self) -> Vec<&AdapterStack> {
        self.stacks.iter().collect()
    }

    /// Token inputs (patch plus position embedding) per sample. The
    /// backbone is frozen during incremental learning, so these stay valid.
    pub fn token_inputs(&self, sets: &[PatchSet]) -> Result<Vec<Vec<f32>>> {
        sets.par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let refs: Vec<&PatchSet> = chunk.iter().collect();
                let mut tape = Tape::new();
                let (e, p) = self.backbone.embed(&mut tape, &self.store, &refs)?;
                let x = tape.add(e, p)?;
                let t = tape.value(x);
                let per = t.len() / chunk.len();
                Ok(t.data.chunks_exact(per).map(|c| c.to_vec()).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    }

    /// CLS embeddings of `idx` under `stacks`, computed in fixed chunks so
    /// the result does not depend on the thread count.
    pub fn cls_embeddings(&self, inputs: &[Vec<f32>], idx: &[usize], stacks: &[&AdapterStack]) -> Result<Vec<Vec<f64>>> {
        let d = self.config().dim;
        idx.par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let x = tape.constant(batch_tokens(inputs, chunk, d)?);
                let enc = self.backbone.encode(&mut tape, &self.store, x, chunk.len(), stacks)?;
                let t = tape.value(enc.cls);
                Ok(t.data.chunks_exact(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    }

    /// Classifier-logit labels for embeddings; ties go to the first column.
    pub fn classify_embeddings(&self, embs: &[Vec<f64>]) -> Result<Vec<u32>> {
        let classes = self.classifier.classes();
        if classes.is_empty() {
            return Err(Error::Protocol("classifier has no columns".into()));
        }
        let cols: Vec<&Tensor<f32>> = self.classifier.blocks.iter().map(|b| &self.store.get(b.w).value).collect();
        Ok(embs
            .iter()
            .map(|e| {
                let mut best = (0usize, f64::NEG_INFINITY);
                let mut at = 0;
                for w in &cols {
                    for j in 0..w.cols {
                        let s: f64 = (0..w.rows).map(|i| e[i] * w.data[i * w.cols + j] as f64).sum();
                        if s > best.1 {
                            best = (at + j, s);
                        }
                    }
                    at += w.cols;
                }
                classes[best.0]
            })
            .collect())
    }

    fn ids_of_stacks(&self, upto: usize) -> Vec<ParamId> {
        self.stacks[..upto].iter().flat_map(|s| s.ids()).collect()
    }

    /// Checksum of the backbone and of every stack before `upto`.
    pub fn frozen_checksum(&self, upto: usize) -> String {
        let mut ids = self.backbone.ids();
        ids.extend(self.ids_of_stacks(upto));
        self.store.checksum(&ids)
    }
}

fn batch_tokens(inputs: &[Vec<f32>], idx: &[usize], d: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(idx.iter().map(|&i| inputs[i].len()).sum());
    for &i in idx {
        data.extend_from_slice(&inputs[i]);
    }
    let rows = data.len() / d;
    Tensor::new(rows, d, data)
}

/// Inputs of one incremental run: datasets plus cached token inputs.
pub struct CilData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub train_inputs: Vec<Vec<f32>>,
    pub test_inputs: Vec<Vec<f32>>,
}

impl<'a> CilData<'a> {
    pub fn new(model: &CilModel, train: &'a Dataset, test: &'a Dataset, train_sets: &[PatchSet], test_sets: &[PatchSet]) -> Result<Self> {
        if train_sets.len() != train.len() || test_sets.len() != test.len() {
            return config_err("patch sets do not line up with the datasets");
        }
        Ok(Self { train, test, train_inputs: model.token_inputs(train_sets)?, test_inputs: model.token_inputs(test_sets)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub ce: f64,
    pub l2: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub classes: Vec<u32>,
    /// Accuracy on the union of test sets of tasks `0..=task`.
    pub accuracy: f64,
    /// Accuracy on each seen task's test set.
    pub per_task: Vec<f64>,
    pub eval_size: usize,
    pub latest_stack_accuracy: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub exemplars_stored: usize,
    pub frozen_intact: bool,
    pub seconds: f64,
}

pub struct StreamResult {
    pub logs: Vec<TaskLog>,
    pub prototypes: PrototypeTable,
    pub exemplars: ExemplarStore,
}

/// Trains task `t`'s adapter stack and new classifier columns.
fn task_train(
    model: &mut CilModel, data: &CilData, task: &Task, protos: &PrototypeTable, exemplars: &ExemplarStore,
    governing: &BTreeMap<u32, Vec<usize>>, cfg: &CilConfig,
) -> Result<(Vec<EpochStats>, PrototypeTable)> {
    let t = task.index;
    let d = model.config().dim;
    let mut r = rng::rng_at(cfg.seed, &[10, t as u64]);
    let stack = AdapterStack::new(&mut model.store, &model.backbone.config, t, &mut r)?;
    for s in &model.stacks {
        for id in s.ids() {
            model.store.set_trainable(id, false);
        }
    }
    model.stacks.push(stack);
    model.classifier.grow(&mut model.store, d, t, &task.classes, &mut r)?;
    for b in &model.classifier.blocks[..t] {
        model.store.set_trainable(b.w, !cfg.exemplar_free());
    }

    // training pool: current data plus old exemplars
    let mut pool: Vec<usize> = task.train.clone();
    for (c, idx) in exemplars {
        if !task.classes.contains(c) {
            pool.extend(idx);
        }
    }
    let mut current = {
        let stacks = model.stack_refs();
        compute_prototypes(governing, t, |idx| model.cls_embeddings(&data.train_inputs, idx, &stacks))?
    };
    let bs = cfg.batch_size.min(pool.len()).max(1);
    let mut sgd = Sgd::new(cfg.lr);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = pool.clone();
        rng::shuffle(&mut rng::rng_at(cfg.seed, &[11, t as u64, epoch as u64]), &mut order);
        let (mut ce_sum, mut l2_sum, mut correct) = (0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let labels: Vec<u32> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let cols: Vec<usize> = labels
                .iter()
                .map(|&l| model.classifier.column_of(l).ok_or_else(|| Error::Protocol(format!("label {l} has no column"))))
                .collect::<Result<_>>()?;
            let mut targets = Vec::with_capacity(chunk.len() * d);
            for &l in &labels {
                let p = current.get(l).or_else(|| protos.get(l)).ok_or_else(|| Error::Protocol(format!("no prototype for class {l}")))?;
                targets.extend(p.iter().map(|&v| v as f32));
            }
            let mut tape = Tape::new();
            let stacks = model.stack_refs();
            let (loss, ce, l2, logits) = composed_loss(
                &mut tape, &model.store, &model.backbone, &stacks, &model.classifier,
                batch_tokens(&data.train_inputs, chunk, d)?, &cols,
                Tensor::new(chunk.len(), d, targets)?, (cfg.ce_weight, cfg.l2_weight),
            )?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("loss at task {t}, epoch {epoch}, batch {bi}")));
            }
            let lg = tape.value(logits);
            correct += cols.iter().enumerate().filter(|&(r, &c)| argmax(lg.row(r)) == c).count();
            ce_sum += tape.value(ce).item() as f64 * chunk.len() as f64;
            l2_sum += tape.value(l2).item() as f64 * chunk.len() as f64;
            let g = tape.backward(loss)?;
            drop(stacks);
            model.store.accumulate(&g);
            sgd.step(&mut model.store)?;
        }
        let n = order.len() as f64;
        stats.push(EpochStats { ce: ce_sum / n, l2: l2_sum / n, accuracy: correct as f64 / n });
        let stacks = model.stack_refs();
        current = compute_prototypes(governing, t, |idx| model.cls_embeddings(&data.train_inputs, idx, &stacks))?;
    }
    Ok((stats, current))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictions for test samples `idx` under the given stacks.
pub fn predict(
    model: &CilModel, inputs: &[Vec<f32>], idx: &[usize], stacks: &[&AdapterStack], table: &PrototypeTable,
    rule: InferenceRule,
) -> Result<Vec<u32>> {
    let embs = model.cls_embeddings(inputs, idx, stacks)?;
    match rule {
        InferenceRule::Prototype => embs.iter().map(|e| predict_embedding(e, table)).collect(),
        InferenceRule::Classifier => model.classify_embeddings(&embs),
    }
}

/// Accuracy over the union of `tasks` test sets and per task.
pub(crate) fn score(
    preds_for: impl Fn(&[usize]) -> Result<Vec<u32>>, test: &Dataset, tasks: &[Task],
) -> Result<(f64, Vec<f64>, usize)> {
    let all: Vec<usize> = tasks.iter().flat_map(|t| t.test.iter().copied()).collect();
    let preds = preds_for(&all)?;
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut at = 0;
    let mut total = 0;
    for t in tasks {
        let n = t.test.len();
        let ok = t.test.iter().zip(&preds[at..at + n]).filter(|&(&i, &p)| test.labels[i] == p).count();
        per_task.push(if n == 0 { 0.0 } else { ok as f64 / n as f64 });
        total += ok;
        at += n;
    }
    Ok((total as f64 / all.len().max(1) as f64, per_task, all.len()))
}

/// Runs the whole stream: for each task train, pick exemplars, form
/// prototypes for the new classes, update old prototypes, then evaluate.
pub fn run_stream(model: &mut CilModel, data: &CilData, stream: &TaskStream, cfg: &CilConfig) -> Result<StreamResult> {
    cfg.validate()?;
    if !model.stacks.is_empty() {
        return config_err("incremental run needs a model without adapter stacks");
    }
    let mut protos = PrototypeTable::default();
    let mut exemplars = ExemplarStore::new();
    let mut logs = Vec::with_capacity(stream.tasks.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        let t0 = Instant::now();
        let before = model.frozen_checksum(t);
        // governing sets for the new classes
        let picked = if cfg.exemplar_free() {
            ExemplarStore::new()
        } else {
            select_exemplars(data.train, &task.classes, cfg.exemplars, cfg.seed)
        };
        let governing: BTreeMap<u32, Vec<usize>> = task
            .classes
            .iter()
            .map(|&c| {
                let idx = if cfg.exemplar_free() {
                    task.train.iter().copied().filter(|&i| data.train.labels[i] == c).collect()
                } else {
                    picked[&c].clone()
                };
                (c, idx)
            })
            .collect();
        // current-class prototypes under the old function, before training
        let q_old = if cfg.exemplar_free() && t > 0 {
            let stacks = model.stack_refs();
            compute_prototypes(&governing, t, |idx| model.cls_embeddings(&data.train_inputs, idx, &stacks))?
        } else {
            PrototypeTable::default()
        };
        let (epochs, q_new) = task_train(model, data, task, &protos, &exemplars, &governing, cfg)?;
        let frozen_intact = model.frozen_checksum(t) == before;
        exemplars.extend(picked);
        if t > 0 {
            protos = if cfg.exemplar_free() {
                semantic_map(&protos, &q_old, &q_new, cfg.tau, t)?
            } else {
                let old: BTreeMap<u32, Vec<usize>> = protos
                    .entries
                    .keys()
                    .map(|&c| (c, exemplars.get(&c).cloned().unwrap_or_default()))
                    .collect();
                let stacks = model.stack_refs();
                compute_prototypes(&old, t, |idx| model.cls_embeddings(&data.train_inputs, idx, &stacks))?
            };
        }
        protos.entries.extend(q_new.entries);
        let seen = &stream.tasks[..=t];
        let stacks = model.stack_refs();
        let (accuracy, per_task, eval_size) = score(
            |idx| predict(model, &data.test_inputs, idx, &stacks, &protos, cfg.inference),
            data.test,
            seen,
        )?;
        let latest_stack_accuracy = if cfg.eval_latest_stack_only {
            let last = [&model.stacks[t]];
            Some(score(|idx| predict(model, &data.test_inputs, idx, &last, &protos, cfg.inference), data.test, seen)?.0)
        } else {
            None
        };
        let log = TaskLog {
            task: t,
            classes: task.classes.clone(),
            accuracy,
            per_task,
            eval_size,
            latest_stack_accuracy,
            epochs,
            exemplars_stored: exemplars.values().map(Vec::len).sum(),
            frozen_intact,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!("task {t}: accuracy {:.4} ({} test samples)", log.accuracy, log.eval_size);
        logs.push(log);
    }
    Ok(StreamResult { logs, prototypes: protos, exemplars })
}
