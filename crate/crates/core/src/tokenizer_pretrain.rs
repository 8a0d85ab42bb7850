//! Codebook tokenizer over patch descriptors and masked-token pre-training
//! of the backbone.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{Backbone, EncoderConfig, Linear};
use crate::error::{config_err, param_err, Error, Result};
use crate::numerics::checkpoint::{self, NamedTensor};
use crate::numerics::{ParamId, ParamStore, Sgd, Tape, Tensor};
use crate::pointops::PatchSet;
use crate::rng;

pub const DEFAULT_CODEBOOK: usize = 64;
pub const DEFAULT_MASK_RATIO: f64 = 0.4;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

/// Offsets of `patch` sorted by distance to the center, flattened to `s*3`.
/// Equal distances fall back to coordinate order so the result does not
/// depend on how points are listed.
pub fn descriptor(set: &PatchSet, patch: usize) -> Vec<f64> {
    let mut offs: Vec<[f64; 3]> = set.offsets_of(patch).iter().map(|o| o.map(f64::from)).collect();
    let key = |o: &[f64; 3]| o[0] * o[0] + o[1] * o[1] + o[2] * o[2];
    offs.sort_by(|a, b| {
        key(a)
            .total_cmp(&key(b))
            .then(a[0].total_cmp(&b[0]))
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    offs.into_iter().flatten().collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `words` (each `dim` long); ties go low.
fn nearest(words: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, w) in words.chunks_exact(dim).enumerate() {
        let d = sq_dist(w, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub dim: usize,
    /// `k * dim`, row-major.
    pub words: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.words.len() / self.dim
    }

    pub fn word(&self, i: usize) -> &[f64] {
        &self.words[i * self.dim..(i + 1) * self.dim]
    }

    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::Shape { op: "assign", left: vec![self.dim], right: vec![x.len()] });
        }
        Ok(nearest(&self.words, self.dim, x).0)
    }
}

/// K-means over `n` rows of `points`. Seeding is farthest-first from a
/// seeded start; Lloyd iterations stop after `KMEANS_MAX_ITERS` or when
/// inertia improves by less than `KMEANS_TOL` relative.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<Codebook> {
    if dim == 0 || points.len() % dim != 0 {
        return param_err(format!("{} values do not form rows of width {dim}", points.len()));
    }
    if k == 0 {
        return config_err("codebook size must be >= 1");
    }
    let n = points.len() / dim;
    let distinct: HashSet<Vec<u64>> = points.chunks_exact(dim).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < k {
        return config_err(format!("only {} distinct descriptors for a codebook of {k}", distinct.len()));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut words = Vec::with_capacity(k * dim);
    let start = rng::uniform_index(&mut rng::rng_from(seed), n);
    words.extend_from_slice(row(start));
    let mut best: Vec<f64> = (0..n).into_par_iter().map(|i| sq_dist(row(i), row(start))).collect();
    for _ in 1..k {
        let mut arg = 0;
        for i in 1..n {
            if best[i] > best[arg] {
                arg = i;
            }
        }
        let w = row(arg).to_vec();
        best.par_iter_mut().enumerate().for_each(|(i, b)| *b = b.min(sq_dist(row(i), &w)));
        words.extend_from_slice(&w);
    }

    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut inertia;
    loop {
        let assign: Vec<(usize, f64)> = (0..n).into_par_iter().map(|i| nearest(&words, dim, row(i))).collect();
        inertia = assign.iter().map(|a| a.1).sum::<f64>();
        let converged = prev.is_finite() && prev - inertia <= KMEANS_TOL * prev;
        if iterations == KMEANS_MAX_ITERS || converged {
            break;
        }
        prev = inertia;
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its old codeword
            if counts[c] > 0 {
                for j in 0..dim {
                    words[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(Codebook { dim, words, inertia, iterations })
}

/// Fits a codebook on the descriptors of `sets`. With `max_descriptors`,
/// a seeded uniform subset of that size is used.
pub fn fit_codebook(sets: &[PatchSet], k: usize, seed: u64, max_descriptors: Option<usize>) -> Result<Codebook> {
    let all: Vec<(usize, usize)> = sets.iter().enumerate().flat_map(|(i, s)| (0..s.groups).map(move |p| (i, p))).collect();
    let picked: Vec<(usize, usize)> = match max_descriptors {
        Some(cap) if cap < all.len() => {
            let mut r = rng::rng_at(seed, &[1]);
            let mut idx = rng::sample_without_replacement(&mut r, all.len(), cap);
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    };
    let Some(&(i0, _)) = picked.first() else {
        return config_err("no patches to fit a codebook on");
    };
    let dim = sets[i0].group_size * 3;
    let data: Vec<f64> = picked.par_iter().flat_map_iter(|&(i, p)| descriptor(&sets[i], p)).collect();
    kmeans(&data, dim, k, seed)
}

pub fn tokenize(set: &PatchSet, codebook: &Codebook) -> Result<Vec<usize>> {
    (0..set.groups).map(|p| codebook.assign(&descriptor(set, p))).collect()
}

/// Rounded masked count, kept within `1..=g-1`.
pub fn masked_count(g: usize, ratio: f64) -> usize {
    ((ratio * g as f64).round() as usize).clamp(1, g.saturating_sub(1).max(1))
}

/// Which patches of one sample are replaced by the mask embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
}

impl MaskPlan {
    pub fn random(g: usize, ratio: f64, rng: &mut rng::Rng) -> Self {
        let mut mask = vec![false; g];
        for i in rng::sample_without_replacement(rng, g, masked_count(g, ratio)) {
            mask[i] = true;
        }
        Self { mask }
    }

    pub fn masked(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub mask_ratio: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub codebook_size: usize,
    pub seed: u64,
    /// Size of the fixed subset scored before and after training.
    pub eval_samples: usize,
    /// Cap on descriptors used for k-means.
    pub kmeans_descriptors: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            mask_ratio: DEFAULT_MASK_RATIO,
            lr: 0.01,
            batch_size: 32,
            codebook_size: DEFAULT_CODEBOOK,
            seed: 0,
            eval_samples: 512,
            kmeans_descriptors: Some(32768),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return config_err(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.codebook_size < 2 {
            return config_err(format!("invalid pre-training config {self:?}"));
        }
        Ok(())
    }
}

/// Backbone plus the pieces only pre-training uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainModel {
    pub backbone: Backbone,
    pub mask_token: ParamId,
    pub head: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub initial: Metrics,
    pub epochs: Vec<EpochLog>,
    pub last: Metrics,
}

struct BatchOut {
    loss: f64,
    correct: usize,
    count: usize,
}

impl PretrainModel {
    pub fn new(store: &mut ParamStore<f32>, config: EncoderConfig, k: usize, rng: &mut rng::Rng) -> Result<Self> {
        let dim = config.dim;
        let backbone = Backbone::new(store, config, rng)?;
        let mask_token = store.add("pretrain.mask", Tensor::randn(1, dim, 0.02, rng), true)?;
        let head = Linear::new(store, "pretrain.head", dim, k, (1.0 / dim as f64).sqrt(), rng)?;
        Ok(Self { backbone, mask_token, head })
    }

    /// Logits at masked positions, their targets and the loss node.
    pub fn masked_forward(
        &self, tape: &mut Tape<f32>, store: &ParamStore<f32>, sets: &[&PatchSet], tokens: &[&[usize]], masks: &[MaskPlan],
    ) -> Result<(crate::numerics::Var, crate::numerics::Var, Vec<usize>)> {
        let g = self.backbone.config.groups;
        let (e, p) = self.backbone.embed(tape, store, sets)?;
        let flat: Vec<bool> = masks.iter().flat_map(|m| m.mask.iter().copied()).collect();
        let fill = tape.param(store, self.mask_token);
        let e = tape.mask_rows(e, fill, &flat)?;
        let x = tape.add(e, p)?;
        let enc = self.backbone.encode(tape, store, x, sets.len(), &[])?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, m) in masks.iter().enumerate() {
            for j in m.masked() {
                rows.push(b * g + j);
                targets.push(tokens[b][j]);
            }
        }
        let picked = tape.embedding_lookup(enc.tokens, &rows)?;
        let logits = self.head.forward(tape, store, picked)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok((loss, logits, targets))
    }

    fn run_batch(
        &self, store: &ParamStore<f32>, sets: &[&PatchSet], tokens: &[&[usize]], masks: &[MaskPlan], train: bool,
    ) -> Result<(BatchOut, Option<crate::numerics::Gradients<f32>>)> {
        let mut tape = Tape::new();
        let (loss, logits, targets) = self.masked_forward(&mut tape, store, sets, tokens, masks)?;
        let lv = tape.value(loss).item() as f64;
        let lg = tape.value(logits);
        let correct = targets
            .iter()
            .enumerate()
            .filter(|&(r, &t)| argmax(lg.row(r)) == t)
            .count();
        let out = BatchOut { loss: lv, correct, count: targets.len() };
        let grads = if train { Some(tape.backward(loss)?) } else { None };
        Ok((out, grads))
    }

    /// Masked loss and accuracy over `idx` with masks fixed by `seed`.
    pub fn evaluate(
        &self, store: &ParamStore<f32>, sets: &[PatchSet], tokens: &[Vec<usize>], idx: &[usize], config: &PretrainConfig,
    ) -> Result<Metrics> {
        let g = self.backbone.config.groups;
        let mut tot = 0.0;
        let mut correct = 0;
        let mut count = 0;
        for chunk in idx.chunks(config.batch_size) {
            let bs: Vec<&PatchSet> = chunk.iter().map(|&i| &sets[i]).collect();
            let bt: Vec<&[usize]> = chunk.iter().map(|&i| tokens[i].as_slice()).collect();
            let masks: Vec<MaskPlan> = chunk
                .iter()
                .map(|&i| MaskPlan::random(g, config.mask_ratio, &mut rng::rng_at(config.seed, &[u64::MAX, i as u64])))
                .collect();
            let (o, _) = self.run_batch(store, &bs, &bt, &masks, false)?;
            tot += o.loss * o.count as f64;
            correct += o.correct;
            count += o.count;
        }
        Ok(Metrics { loss: tot / count.max(1) as f64, accuracy: correct as f64 / count.max(1) as f64, predictions: count })
    }
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

/// Masked-token pre-training. The backbone and pre-training head are all
/// trainable. `on_epoch` sees each epoch's log as it completes.
pub fn pretrain(
    model: &PretrainModel, store: &mut ParamStore<f32>, sets: &[PatchSet], tokens: &[Vec<usize>], config: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainLog> {
    config.validate()?;
    if sets.len() != tokens.len() || sets.is_empty() {
        return param_err(format!("{} patch sets but {} token lists", sets.len(), tokens.len()));
    }
    let g = model.backbone.config.groups;
    let n = sets.len();
    let mut eval_idx = rng::sample_without_replacement(&mut rng::rng_at(config.seed, &[2]), n, config.eval_samples.min(n));
    eval_idx.sort_unstable();
    let initial = model.evaluate(store, sets, tokens, &eval_idx, config)?;
    let mut sgd = Sgd::new(config.lr);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut rng::rng_at(config.seed, &[3, epoch as u64]), &mut order);
        let (mut tot, mut correct, mut count) = (0.0, 0, 0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let bs: Vec<&PatchSet> = chunk.iter().map(|&i| &sets[i]).collect();
            let bt: Vec<&[usize]> = chunk.iter().map(|&i| tokens[i].as_slice()).collect();
            let masks: Vec<MaskPlan> = chunk
                .iter()
                .map(|&i| MaskPlan::random(g, config.mask_ratio, &mut rng::rng_at(config.seed, &[4, epoch as u64, i as u64])))
                .collect();
            let (o, grads) = model.run_batch(store, &bs, &bt, &masks, true)?;
            if !o.loss.is_finite() {
                return Err(Error::NonFinite(format!("pre-training loss at epoch {epoch}, batch {b}")));
            }
            store.accumulate(&grads.expect("training batch has gradients"));
            sgd.step(store)?;
            tot += o.loss * o.count as f64;
            correct += o.correct;
            count += o.count;
        }
        let log = EpochLog {
            epoch,
            loss: tot / count as f64,
            accuracy: correct as f64 / count as f64,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!("pretrain epoch {epoch}: loss {:.4} acc {:.4}", log.loss, log.accuracy);
        on_epoch(&log);
        epochs.push(log);
    }
    let last = model.evaluate(store, sets, tokens, &eval_idx, config)?;
    Ok(PretrainLog { initial, epochs, last })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: EncoderConfig,
    config_hash: String,
    codebook: Codebook,
    pretrain: Option<PretrainConfig>,
    log: Option<PretrainLog>,
}

/// A loaded pre-trained checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub config: EncoderConfig,
    pub config_hash: String,
    pub codebook: Codebook,
    pub pretrain: Option<PretrainConfig>,
    pub log: Option<PretrainLog>,
    pub tensors: Vec<NamedTensor<f32>>,
}

impl Pretrained {
    pub fn from_model(
        model: &PretrainModel, store: &ParamStore<f32>, codebook: Codebook, pretrain: Option<PretrainConfig>,
        log: Option<PretrainLog>,
    ) -> Self {
        let config = model.backbone.config.clone();
        Self {
            config_hash: config.hash(),
            config,
            codebook,
            pretrain,
            log,
            tensors: checkpoint::snapshot(store),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            codebook: self.codebook.clone(),
            pretrain: self.pretrain.clone(),
            log: self.log.clone(),
        };
        checkpoint::encode(&serde_json::to_string(&meta).expect("meta serializes"), &self.tensors)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = checkpoint::decode::<f32>(bytes)?;
        let m: CheckpointMeta = serde_json::from_str(&meta)?;
        Ok(Self { config: m.config, config_hash: m.config_hash, codebook: m.codebook, pretrain: m.pretrain, log: m.log, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Rebuilds the backbone into `store` with checkpoint values. Fails when
    /// the stored config hash does not match `expected` (or the stored
    /// config itself).
    pub fn backbone(&self, store: &mut ParamStore<f32>, expected: &EncoderConfig) -> Result<Backbone> {
        if self.config_hash != self.config.hash() {
            return config_err(format!("checkpoint config hash {} does not match its config", self.config_hash));
        }
        if self.config_hash != expected.hash() {
            return config_err(format!(
                "checkpoint config hash {} does not match the requested encoder ({})",
                self.config_hash,
                expected.hash()
            ));
        }
        let mut fresh = ParamStore::new();
        let bb = Backbone::new(&mut fresh, self.config.clone(), &mut rng::rng_from(0))?;
        checkpoint::restore(&mut fresh, &self.tensors)?;
        // move the restored values into `store`, keeping ids valid there
        if !store.is_empty() {
            return config_err("backbone must be the first thing loaded into a parameter store");
        }
        *store = fresh;
        Ok(bb)
    }
}
