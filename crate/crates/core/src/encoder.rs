//! Point-patch transformer encoder with per-task adapter stacks and a
//! growing linear classifier.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::pointops::PatchSet;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub bottleneck: usize,
    /// Patches per cloud.
    pub groups: usize,
    /// Points per patch.
    pub group_size: usize,
    /// Widths of the shared per-point MLP in the patch embedder.
    pub point_hidden: usize,
    pub point_feat: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 128,
            heads: 4,
            ff_dim: 256,
            bottleneck: 16,
            groups: 64,
            group_size: 32,
            point_hidden: 32,
            point_feat: 64,
        }
    }
}

impl EncoderConfig {
    /// Narrower preset that fits the desk benchmark's time budget on one
    /// CPU core: D=64, FF=128, otherwise the defaults.
    pub fn desk() -> Self {
        Self { dim: 64, ff_dim: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers, self.dim, self.heads, self.ff_dim, self.bottleneck,
            self.groups, self.group_size, self.point_hidden, self.point_feat,
        ];
        if dims.contains(&0) {
            return config_err(format!("encoder sizes must all be >= 1: {self:?}"));
        }
        if self.bottleneck >= self.dim {
            return config_err(format!("bottleneck {} must be below dim {}", self.bottleneck, self.dim));
        }
        if self.dim % self.heads != 0 {
            return config_err(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }

    /// Short stable digest of the architecture.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::randn(fan_in, fan_out, std, rng), true)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out), true)?;
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.g"), Tensor::from_f64(1, dim, &vec![1.0; dim])?, true)?;
        let beta = store.add(format!("{name}.b"), Tensor::zeros(1, dim), true)?;
        Ok(Self { gamma, beta })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.ln1.gamma, self.ln1.beta, self.ln2.gamma, self.ln2.beta];
        for l in [&self.q, &self.k, &self.v, &self.o, &self.ff1, &self.ff2] {
            v.extend(l.ids());
        }
        v
    }
}

/// Patch embedder, position MLP, `[CLS]` token and transformer blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub point1: Linear,
    pub point2: Linear,
    pub patch_out: Linear,
    pub pos1: Linear,
    pub pos2: Linear,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
}

/// One `down -> relu -> up` residual adapter per transformer block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterStack {
    pub task: usize,
    pub adapters: Vec<(Linear, Linear)>,
}

impl AdapterStack {
    /// Fresh stack whose up-projections start at zero, so it begins as the
    /// identity map.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &EncoderConfig, task: usize, rng: &mut Rng) -> Result<Self> {
        let (d, r) = (config.dim, config.bottleneck);
        let mut adapters = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let down = Linear::new(store, &format!("adapter{task}.{l}.down"), d, r, (1.0 / d as f64).sqrt(), rng)?;
            let up = Linear::new(store, &format!("adapter{task}.{l}.up"), r, d, 0.0, rng)?;
            adapters.push((down, up));
        }
        Ok(Self { task, adapters })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.adapters.iter().flat_map(|(d, u)| d.ids().into_iter().chain(u.ids())).collect()
    }
}

/// Encoder outputs for a batch.
pub struct Encoded {
    /// `batch x dim`, after the final norm.
    pub cls: Var,
    /// `(batch*groups) x dim`, after the final norm.
    pub tokens: Var,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let he = |n: usize| (2.0 / n as f64).sqrt();
        let xa = |n: usize| (1.0 / n as f64).sqrt();
        let point1 = Linear::new(store, "patch.point1", 3, c.point_hidden, he(3), rng)?;
        let point2 = Linear::new(store, "patch.point2", c.point_hidden, c.point_feat, he(c.point_hidden), rng)?;
        let patch_out = Linear::new(store, "patch.out", c.point_feat, c.dim, xa(c.point_feat), rng)?;
        let pos1 = Linear::new(store, "pos.fc1", 3, c.dim, he(3), rng)?;
        let pos2 = Linear::new(store, "pos.fc2", c.dim, c.dim, xa(c.dim), rng)?;
        let cls = store.add("cls", Tensor::randn(1, c.dim, 0.02, rng), true)?;
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |s: &str| format!("block{l}.{s}");
            blocks.push(Block {
                ln1: Norm::new(store, &p("ln1"), c.dim)?,
                q: Linear::new(store, &p("q"), c.dim, c.dim, xa(c.dim), rng)?,
                k: Linear::new(store, &p("k"), c.dim, c.dim, xa(c.dim), rng)?,
                v: Linear::new(store, &p("v"), c.dim, c.dim, xa(c.dim), rng)?,
                o: Linear::new(store, &p("o"), c.dim, c.dim, xa(c.dim) / (2.0 * c.layers as f64).sqrt(), rng)?,
                ln2: Norm::new(store, &p("ln2"), c.dim)?,
                ff1: Linear::new(store, &p("ff1"), c.dim, c.ff_dim, xa(c.dim), rng)?,
                ff2: Linear::new(store, &p("ff2"), c.ff_dim, c.dim, xa(c.ff_dim) / (2.0 * c.layers as f64).sqrt(), rng)?,
            });
        }
        let final_norm = Norm::new(store, "final_norm", c.dim)?;
        Ok(Self { config, point1, point2, patch_out, pos1, pos2, cls, blocks, final_norm })
    }

    /// Parameters of the patch embedder and position MLP.
    pub fn embed_ids(&self) -> Vec<ParamId> {
        [&self.point1, &self.point2, &self.patch_out, &self.pos1, &self.pos2]
            .iter()
            .flat_map(|l| l.ids())
            .collect()
    }

    /// Every backbone parameter.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.embed_ids();
        v.push(self.cls);
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v.extend([self.final_norm.gamma, self.final_norm.beta]);
        v
    }

    /// Patch embeddings and position embeddings, each `(batch*groups) x dim`.
    pub fn embed<T: Real>(
        &self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: &[&PatchSet],
    ) -> Result<(Var, Var)> {
        let (g, s) = (self.config.groups, self.config.group_size);
        for p in patches {
            if p.groups != g || p.group_size != s {
                return config_err(format!(
                    "patch set is {}x{}, encoder expects {g}x{s}",
                    p.groups, p.group_size
                ));
            }
        }
        let offs: Vec<T> = patches
            .iter()
            .flat_map(|p| p.offsets.iter().flat_map(|o| o.iter().map(|&v| T::c(v as f64))))
            .collect();
        let cens: Vec<T> = patches
            .iter()
            .flat_map(|p| p.centers.iter().flat_map(|o| o.iter().map(|&v| T::c(v as f64))))
            .collect();
        let n = patches.len();
        let x = tape.constant(Tensor::new(n * g * s, 3, offs)?);
        let h = self.point1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let (w2, b2) = (tape.param(store, self.point2.w), tape.param(store, self.point2.b));
        let h = tape.linear_relu_max(h, w2, b2, s)?;
        let e = self.patch_out.forward(tape, store, h)?;
        let c = tape.constant(Tensor::new(n * g, 3, cens)?);
        let p = self.pos1.forward(tape, store, c)?;
        let p = tape.gelu(p);
        let p = self.pos2.forward(tape, store, p)?;
        Ok((e, p))
    }

    /// Runs the transformer on `tokens` (`(batch*groups) x dim`, already
    /// including position embeddings). Adapter stacks follow every block in
    /// the given order.
    pub fn encode<T: Real>(
        &self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var, batch: usize, stacks: &[&AdapterStack],
    ) -> Result<Encoded> {
        let c = &self.config;
        let g = c.groups;
        let seq = g + 1;
        let cls = tape.param(store, self.cls);
        let all = tape.concat_rows(&[cls, tokens])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..g).map(move |j| 1 + b * g + j)))
            .collect();
        let mut x = tape.embedding_lookup(all, &order)?;
        for (l, blk) in self.blocks.iter().enumerate() {
            let h = blk.ln1.forward(tape, store, x)?;
            let q = blk.q.forward(tape, store, h)?;
            let k = blk.k.forward(tape, store, h)?;
            let v = blk.v.forward(tape, store, h)?;
            let a = tape.attention(q, k, v, batch, seq, c.heads)?;
            let a = blk.o.forward(tape, store, a)?;
            x = tape.add(x, a)?;
            let h = blk.ln2.forward(tape, store, x)?;
            let h = blk.ff1.forward(tape, store, h)?;
            let h = tape.gelu(h);
            let h = blk.ff2.forward(tape, store, h)?;
            x = tape.add(x, h)?;
            for st in stacks {
                let (down, up) = &st.adapters[l];
                let h = down.forward(tape, store, x)?;
                let h = tape.relu(h);
                let h = up.forward(tape, store, h)?;
                x = tape.add(x, h)?;
            }
        }
        let x = self.final_norm.forward(tape, store, x)?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let tok_rows: Vec<usize> = (0..batch).flat_map(|b| (1..seq).map(move |j| b * seq + j)).collect();
        let cls = tape.embedding_lookup(x, &cls_rows)?;
        let tokens = tape.embedding_lookup(x, &tok_rows)?;
        Ok(Encoded { cls, tokens })
    }

    /// Full forward from patches to encoder outputs.
    pub fn forward<T: Real>(
        &self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: &[&PatchSet], stacks: &[&AdapterStack],
    ) -> Result<Encoded> {
        let (e, p) = self.embed(tape, store, patches)?;
        let t = tape.add(e, p)?;
        self.encode(tape, store, t, patches.len(), stacks)
    }
}

/// Classifier columns added per task; logits are `cls * W`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierBlock {
    pub task: usize,
    pub w: ParamId,
    pub classes: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classifier {
    pub blocks: Vec<ClassifierBlock>,
}

impl Classifier {
    pub fn grow<T: Real>(
        &mut self, store: &mut ParamStore<T>, dim: usize, task: usize, classes: &[u32], rng: &mut Rng,
    ) -> Result<()> {
        let w = store.add(format!("classifier{task}"), Tensor::randn(dim, classes.len(), 0.01, rng), true)?;
        self.blocks.push(ClassifierBlock { task, w, classes: classes.to_vec() });
        Ok(())
    }

    /// Labels in column order.
    pub fn classes(&self) -> Vec<u32> {
        self.blocks.iter().flat_map(|b| b.classes.iter().copied()).collect()
    }

    pub fn column_of(&self, label: u32) -> Option<usize> {
        self.classes().iter().position(|&c| c == label)
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cls: Var) -> Result<Var> {
        let parts: Vec<Var> = self
            .blocks
            .iter()
            .map(|b| {
                let w = tape.param(store, b.w);
                tape.matmul(cls, w)
            })
            .collect::<Result<_>>()?;
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat_cols(&parts)
    }
}
