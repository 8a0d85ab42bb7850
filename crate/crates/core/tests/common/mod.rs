//! Shared helpers for the integration and acceptance targets: gradient
//! checks and brute-force reference implementations.
#![allow(dead_code)]

use std::collections::BTreeMap;

use bsa::cil_engine::{compute_prototypes, composed_loss, predict_embedding, PrototypeTable};
use bsa::encoder::{AdapterStack, Backbone, Classifier, EncoderConfig};
use bsa::geometry::{PointCloud, Vec3};
use bsa::numerics::gradcheck::{self, ParamCheck};
use bsa::numerics::{ParamStore, Tape, Tensor, Var};
use bsa::pointops::{chamfer, fps, group_patches, knn, PatchSet};
use bsa::rng;
use bsa::tokenizer_pretrain::{descriptor, kmeans, tokenize, Codebook};
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const KERNEL_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        ff_dim: 12,
        bottleneck: 3,
        groups: 4,
        group_size: 5,
        point_hidden: 6,
        point_feat: 7,
    }
}

fn randn(r: usize, c: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(r, c, 1.0, &mut rng::rng_from(seed))
}

fn worst(checks: &[ParamCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> bsa::Result<Var>>;

/// One kernel check: parameters of the given shapes feed `build`, whose
/// output is compared to a fixed random target by squared error.
fn kernel(shapes: &[(usize, usize)], seed: u64, build: Build) -> bsa::Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("p{i}"), randn(r, c, seed * 31 + i as u64), true))
        .collect::<bsa::Result<_>>()?;
    let f = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> bsa::Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        let y = build(tape, &vars)?;
        let (r, c) = tape.shape(y);
        if (r, c) == (1, 1) {
            return Ok(y);
        }
        let t = tape.constant(randn(r, c, seed ^ 0xabc));
        tape.squared_error(y, t)
    };
    Ok(worst(&gradcheck::check(&mut store, f, H, 64)?))
}

/// Worst relative error per kernel.
pub fn kernel_checks() -> bsa::Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    out.push(("matmul", kernel(&[(3, 4), (4, 5)], 1, Box::new(|t, v| t.matmul(v[0], v[1])))?));
    out.push(("linear", kernel(&[(3, 4), (4, 5), (1, 5)], 2, Box::new(|t, v| t.linear(v[0], v[1], v[2])))?));
    out.push(("add", kernel(&[(3, 4), (3, 4)], 3, Box::new(|t, v| t.add(v[0], v[1])))?));
    out.push(("add_broadcast", kernel(&[(3, 4), (1, 4)], 4, Box::new(|t, v| t.add(v[0], v[1])))?));
    out.push(("scale", kernel(&[(3, 4)], 5, Box::new(|t, v| Ok(t.scale(v[0], -1.7))))?));
    out.push(("relu", kernel(&[(4, 5)], 6, Box::new(|t, v| Ok(t.relu(v[0]))))?));
    out.push(("gelu", kernel(&[(4, 5)], 7, Box::new(|t, v| Ok(t.gelu(v[0]))))?));
    out.push(("layer_norm", kernel(&[(3, 6), (1, 6), (1, 6)], 8, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])))?));
    out.push(("softmax", kernel(&[(3, 5)], 9, Box::new(|t, v| Ok(t.softmax(v[0]))))?));
    out.push(("concat_rows", kernel(&[(2, 3), (4, 3)], 10, Box::new(|t, v| t.concat_rows(&[v[0], v[1]])))?));
    out.push(("concat_cols", kernel(&[(3, 2), (3, 4)], 11, Box::new(|t, v| t.concat_cols(&[v[0], v[1]])))?));
    out.push(("mean", kernel(&[(3, 4)], 12, Box::new(|t, v| Ok(t.mean(v[0]))))?));
    out.push(("embedding_lookup", kernel(&[(5, 3)], 13, Box::new(|t, v| t.embedding_lookup(v[0], &[4, 0, 4, 2])))?));
    out.push((
        "mask_rows",
        kernel(&[(4, 3), (1, 3)], 14, Box::new(|t, v| t.mask_rows(v[0], v[1], &[true, false, true, false])))?,
    ));
    out.push(("max_pool", kernel(&[(6, 4)], 15, Box::new(|t, v| t.max_pool(v[0], 3)))?));
    out.push((
        "linear_relu_max",
        kernel(&[(6, 4), (4, 5), (1, 5)], 19, Box::new(|t, v| t.linear_relu_max(v[0], v[1], v[2], 3)))?,
    ));
    out.push((
        "attention",
        kernel(&[(6, 4), (6, 4), (6, 4)], 16, Box::new(|t, v| t.attention(v[0], v[1], v[2], 2, 3, 2)))?,
    ));
    out.push(("cross_entropy", kernel(&[(4, 5)], 17, Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 4, 3])))?));
    out.push((
        "squared_error",
        kernel(&[(3, 4), (3, 4)], 18, Box::new(|t, v| t.squared_error(v[0], v[1])))?,
    ));
    Ok(out)
}

fn random_patch_sets(cfg: &EncoderConfig, n: usize, seed: u64) -> bsa::Result<Vec<PatchSet>> {
    (0..n)
        .map(|i| {
            let mut r = rng::rng_at(seed, &[i as u64]);
            let pts: Vec<Vec3> = (0..40).map(|_| [r.random::<f64>() - 0.5, r.random::<f64>() - 0.5, r.random::<f64>() - 0.5]).collect();
            group_patches(&pts, cfg.groups, cfg.group_size, i as u64)
        })
        .collect()
}

/// Worst relative error of the incremental objective `CE + L2` with every
/// backbone, adapter and classifier parameter trainable.
pub fn composed_check() -> bsa::Result<f64> {
    let cfg = tiny_encoder();
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::rng_from(5);
    let backbone = Backbone::new(&mut store, cfg.clone(), &mut r)?;
    let s0 = AdapterStack::new(&mut store, &cfg, 0, &mut r)?;
    let s1 = AdapterStack::new(&mut store, &cfg, 1, &mut r)?;
    // non-zero up projections so the down projections get gradient
    for st in [&s0, &s1] {
        for (_, up) in &st.adapters {
            store.get_mut(up.w).value = Tensor::randn(cfg.bottleneck, cfg.dim, 0.3, &mut r);
        }
    }
    let mut classifier = Classifier::default();
    classifier.grow(&mut store, cfg.dim, 0, &[4, 1], &mut r)?;
    classifier.grow(&mut store, cfg.dim, 1, &[0, 2, 3], &mut r)?;
    // zero-initialized biases put ReLU inputs exactly on the kink for the
    // patch-center rows, where central differences are meaningless
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let noise = Tensor::<f64>::randn(p.value.rows, p.value.cols, 0.05, &mut r);
        p.value.data.iter_mut().zip(&noise.data).for_each(|(v, n)| *v += n);
    }
    let sets = random_patch_sets(&cfg, 3, 9)?;
    let targets = Tensor::randn(3, cfg.dim, 1.0, &mut r);
    let cols = [0usize, 4, 2];
    let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> bsa::Result<Var> {
        let refs: Vec<&PatchSet> = sets.iter().collect();
        // embed on the tape first so the patch path is checked as well
        let (e, p) = backbone.embed(tape, s, &refs)?;
        let x = tape.add(e, p)?;
        let enc = backbone.encode(tape, s, x, refs.len(), &[&s0, &s1])?;
        let logits = classifier.logits(tape, s, enc.cls)?;
        let ce = tape.cross_entropy(logits, &cols)?;
        let tg = tape.constant(targets.clone());
        let l2 = tape.squared_error(enc.cls, tg)?;
        tape.add(ce, l2)
    };
    let mut worst_err = worst(&gradcheck::check(&mut store, f, H, 24)?);

    // the library's own composition, on cached token inputs
    let tokens = {
        let mut tape = Tape::new();
        let refs: Vec<&PatchSet> = sets.iter().collect();
        let (e, p) = backbone.embed(&mut tape, &store, &refs)?;
        let x = tape.add(e, p)?;
        tape.value(x).clone()
    };
    let g = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> bsa::Result<Var> {
        let (loss, ..) =
            composed_loss(tape, s, &backbone, &[&s0, &s1], &classifier, tokens.clone(), &cols, targets.clone(), (1.0, 1.0))?;
        Ok(loss)
    };
    worst_err = worst_err.max(worst(&gradcheck::check(&mut store, g, H, 24)?));
    Ok(worst_err)
}

// ---- brute-force references ----

pub fn brute_fps(points: &[Vec3], g: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < g {
        let mut best = (0usize, -1.0f64);
        for (i, p) in points.iter().enumerate() {
            let d = chosen
                .iter()
                .map(|&c| {
                    let q = points[c];
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                })
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen.push(best.0);
    }
    chosen
}

pub fn brute_knn(points: &[Vec3], q: Vec3, s: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.into_iter().take(s).map(|x| x.1).collect()
}

pub fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one = |x: &[Vec3], y: &[Vec3]| {
        let mut tot = 0.0;
        for p in x {
            let mut m = f64::INFINITY;
            for q in y {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < m {
                    m = d;
                }
            }
            tot += m;
        }
        tot / x.len() as f64
    };
    one(a, b) + one(b, a)
}

fn brute_descriptor(set: &PatchSet, p: usize) -> Vec<f64> {
    let mut rows: Vec<(f64, f64, f64, f64)> = set
        .offsets_of(p)
        .iter()
        .map(|o| {
            let (x, y, z) = (o[0] as f64, o[1] as f64, o[2] as f64);
            (x * x + y * y + z * z, x, y, z)
        })
        .collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rows.into_iter().flat_map(|r| [r.1, r.2, r.3]).collect()
}

pub fn brute_tokenize(set: &PatchSet, cb: &Codebook) -> Vec<usize> {
    (0..set.groups)
        .map(|p| {
            let d = brute_descriptor(set, p);
            let mut best = (usize::MAX, f64::INFINITY);
            for k in 0..cb.k() {
                let dist: f64 = cb.word(k).iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0
        })
        .collect()
}

pub fn brute_cosine_label(e: &[f64], protos: &[(u32, Vec<f64>)]) -> u32 {
    let mut sorted = protos.to_vec();
    sorted.sort_by_key(|p| p.0);
    let score = |v: &[f64]| {
        let dot: f64 = e.iter().zip(v).map(|(a, b)| a * b).sum();
        dot / (e.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|a| a * a).sum::<f64>().sqrt())
    };
    let mut best = (sorted[0].0, score(&sorted[0].1));
    for (c, v) in &sorted[1..] {
        let s = score(v);
        if s > best.1 {
            best = (*c, s);
        }
    }
    best.0
}

/// Points on a small integer grid, so many distances tie exactly.
pub fn grid_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng::rng_from(seed);
    (0..n).map(|_| [r.random_range(0..4) as f64, r.random_range(0..4) as f64, r.random_range(0..3) as f64]).collect()
}

pub fn uniform_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng::rng_from(seed);
    (0..n).map(|_| [r.random::<f64>() * 2.0 - 1.0, r.random::<f64>() * 2.0 - 1.0, r.random::<f64>() * 2.0 - 1.0]).collect()
}

/// Counts of (instances, mismatches) per oracle family.
#[derive(Debug, Default)]
pub struct OracleTally {
    pub rows: Vec<(&'static str, usize, usize)>,
}

impl OracleTally {
    pub fn all_ok(&self, min_instances: usize) -> bool {
        self.rows.iter().all(|&(_, n, bad)| n >= min_instances && bad == 0)
    }
}

pub fn run_oracles(instances: usize) -> bsa::Result<OracleTally> {
    let mut tally = OracleTally::default();

    let mut bad = 0;
    for i in 0..instances {
        let pts = if i % 2 == 0 { grid_points(30 + i, i as u64) } else { uniform_points(50 + i, i as u64) };
        let g = 1 + i % 12;
        let got = fps(&pts, g, i as u64)?;
        if got != brute_fps(&pts, g, got[0]) {
            bad += 1;
        }
    }
    tally.rows.push(("fps", instances, bad));

    let mut bad = 0;
    for i in 0..instances {
        let pts = if i % 2 == 0 { grid_points(40, 100 + i as u64) } else { uniform_points(40, 100 + i as u64) };
        let q = pts[i % pts.len()];
        let s = 1 + i % 20;
        if knn(&pts, q, s) != brute_knn(&pts, q, s) {
            bad += 1;
        }
    }
    tally.rows.push(("knn", instances, bad));

    let mut bad = 0;
    for i in 0..instances {
        let a = uniform_points(10 + i, 200 + i as u64);
        let b = uniform_points(25 - i % 10, 300 + i as u64);
        let got = chamfer(&PointCloud::new(a.clone()), &PointCloud::new(b.clone()))?;
        let want = brute_chamfer(&a, &b);
        if (got - want).abs() > 1e-12 * want.max(1.0) {
            bad += 1;
        }
    }
    tally.rows.push(("chamfer", instances, bad));

    let mut bad = 0;
    for i in 0..instances {
        let pts = if i % 3 == 0 { grid_points(60, 400 + i as u64) } else { uniform_points(60, 400 + i as u64) };
        let set = group_patches(&pts, 6, 5, i as u64)?;
        let words = (0..6).flat_map(|p| descriptor(&set, p)).collect::<Vec<_>>();
        let cb = match kmeans(&words, 15, 3, i as u64) {
            Ok(cb) => cb,
            Err(_) => {
                // too few distinct descriptors on a tiny grid: pick random words
                let mut r = rng::rng_from(i as u64);
                Codebook { dim: 15, words: (0..45).map(|_| r.random::<f64>() - 0.5).collect(), inertia: 0.0, iterations: 0 }
            }
        };
        if tokenize(&set, &cb)? != brute_tokenize(&set, &cb) {
            bad += 1;
        }
    }
    tally.rows.push(("tokenizer", instances, bad));

    let mut bad = 0;
    for i in 0..instances {
        let mut r = rng::rng_from(500 + i as u64);
        let d = 4 + i % 5;
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..d).map(|_| r.random::<f64>() * 4.0 - 2.0).collect()).collect();
        let mut groups = BTreeMap::new();
        for c in 0..3u32 {
            let idx: Vec<usize> = (0..30).filter(|j| (j + i) % 3 == c as usize).collect();
            groups.insert(c, idx);
        }
        let table = compute_prototypes(&groups, 0, |idx| Ok(idx.iter().map(|&j| rows[j].clone()).collect()))?;
        for (c, idx) in &groups {
            let want: Vec<f64> = (0..d).map(|k| idx.iter().map(|&j| rows[j][k]).sum::<f64>() / idx.len() as f64).collect();
            let got = table.get(*c).unwrap();
            if got.iter().zip(&want).any(|(a, b)| (a - b).abs() > 1e-12) {
                bad += 1;
                break;
            }
        }
    }
    tally.rows.push(("prototype_mean", instances, bad));

    let mut bad = 0;
    for i in 0..instances {
        let mut r = rng::rng_from(600 + i as u64);
        let d = 3 + i % 4;
        let mut protos: Vec<(u32, Vec<f64>)> =
            (0..5).map(|c| ((c * 7 % 5) as u32, (0..d).map(|_| r.random::<f64>() - 0.5).collect())).collect();
        if i % 4 == 0 {
            // exact tie between two labels
            protos[3].1 = protos[1].1.clone();
        }
        let mut table = PrototypeTable::default();
        for (c, v) in &protos {
            table.set(*c, 0, v.clone());
        }
        let e: Vec<f64> = if i % 4 == 0 { protos[1].1.clone() } else { (0..d).map(|_| r.random::<f64>() - 0.5).collect() };
        if predict_embedding(&e, &table)? != brute_cosine_label(&e, &protos) {
            bad += 1;
        }
    }
    tally.rows.push(("cosine_predict", instances, bad));
    Ok(tally)
}

// ---- geometry ----

use bsa::geometry::{sample_shape, RegularSolid, ShapeParams};

pub fn all_shape_params() -> Vec<ShapeParams> {
    let mut v = vec![
        ShapeParams::Cone { radius: 0.7, height: 1.3 },
        ShapeParams::Cylinder { radius: 0.4, height: 1.1 },
        ShapeParams::Ellipsoid { a: 0.9, b: 0.5, c: 0.3 },
    ];
    v.extend(RegularSolid::ALL.iter().map(|&solid| ShapeParams::Polyhedron { solid, radius: 0.8 }));
    for sides in 3..=8 {
        v.push(ShapeParams::Prism { sides, radius: 0.6, height: 0.9 });
        v.push(ShapeParams::Pyramid { sides, radius: 0.5, height: 1.2 });
    }
    v
}

/// Largest surface residual over every shape, plus closed-form checks where
/// the surface has a simple implicit form.
pub fn max_residual(m: usize) -> bsa::Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, p) in all_shape_params().iter().enumerate() {
        let pc = sample_shape(p, m, 1000 + i as u64)?;
        for q in &pc.points {
            worst = worst.max(p.residual(*q));
            let own = match *p {
                ShapeParams::Cylinder { radius, height } => {
                    let over = (q[2].abs() - height / 2.0).max(0.0);
                    (q[0] * q[0] + q[1] * q[1] - radius * radius).abs().max(over)
                }
                ShapeParams::Ellipsoid { a, b, c } => {
                    ((q[0] / a).powi(2) + (q[1] / b).powi(2) + (q[2] / c).powi(2) - 1.0).abs()
                }
                ShapeParams::Polyhedron { solid: RegularSolid::Cube, radius } => {
                    let h = radius / 3f64.sqrt();
                    (q[0].abs().max(q[1].abs()).max(q[2].abs()) - h).abs()
                }
                _ => 0.0,
            };
            worst = worst.max(own);
        }
    }
    Ok(worst)
}

/// Fraction of cube samples on each face and the chi-square statistic
/// against a uniform split.
pub fn cube_faces(m: usize, seed: u64) -> bsa::Result<([f64; 6], f64)> {
    let pc = sample_shape(&ShapeParams::Polyhedron { solid: RegularSolid::Cube, radius: 3f64.sqrt() }, m, seed)?;
    let mut counts = [0usize; 6];
    for q in &pc.points {
        let mut axis = 0;
        for k in 1..3 {
            if q[k].abs() > q[axis].abs() {
                axis = k;
            }
        }
        counts[axis * 2 + usize::from(q[axis] > 0.0)] += 1;
    }
    let expect = m as f64 / 6.0;
    let chi2 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    Ok((counts.map(|c| c as f64 / m as f64), chi2))
}

/// Upper 1% point of chi-square with 5 degrees of freedom.
pub const CHI2_DF5_99: f64 = 15.086;
