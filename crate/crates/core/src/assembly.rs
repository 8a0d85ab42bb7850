//! Class templates built from basic shapes and their instantiation into
//! normalized point clouds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, param_err, Result};
use crate::geometry::{
    self, apply_transform, PointCloud, Quaternion, ShapeKind, ShapeParams, ShapePool, Transform,
    Vec3, SCALE_RANGE, TRANSLATION_BOUND,
};
use crate::rng::{self, Rng};

pub const MAX_ELEMENTS: usize = 8;

/// Per-sample perturbation bounds around an element's nominal transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Maximum extra rotation angle, degrees.
    pub rotation_deg: f64,
    /// Per-axis translation offset bound.
    pub translation: f64,
    /// Relative scale perturbation bound.
    pub scale: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { rotation_deg: 15.0, translation: 0.05, scale: 0.1 }
    }
}

impl Jitter {
    pub const NONE: Jitter = Jitter { rotation_deg: 0.0, translation: 0.0, scale: 0.0 };

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.rotation_deg) && ok(self.translation) && ok(self.scale) && self.scale < 1.0 {
            Ok(())
        } else {
            param_err(format!("jitter bounds {self:?} must be finite and non-negative"))
        }
    }
}

/// One element of a template: a pool shape picked by kind and slot, placed by
/// a nominal transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementRule {
    pub kind: ShapeKind,
    /// Index among the pool entries of `kind` (taken modulo their count).
    pub slot: usize,
    pub nominal: Transform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub id: u32,
    pub elements: Vec<ElementRule>,
    pub jitter: Jitter,
}

/// Concrete per-element shapes and transforms of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyRecipe {
    pub parts: Vec<(ShapeParams, Transform)>,
}

/// An instance together with bookkeeping for inspection.
#[derive(Debug, Clone)]
pub struct Instance {
    pub cloud: PointCloud,
    pub label: u32,
    pub recipe: AssemblyRecipe,
    /// Element index of every output point.
    pub provenance: Vec<usize>,
    /// Output points before recentering and rescaling.
    pub raw: PointCloud,
}

impl ClassTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() || self.elements.len() > MAX_ELEMENTS {
            return param_err(format!(
                "template {} has {} elements, expected 1..={MAX_ELEMENTS}",
                self.id,
                self.elements.len()
            ));
        }
        self.jitter.validate()?;
        for e in &self.elements {
            e.nominal.validate()?;
        }
        Ok(())
    }

    pub fn kinds(&self) -> BTreeSet<ShapeKind> {
        self.elements.iter().map(|e| e.kind).collect()
    }
}

/// Draws a jittered transform around `nominal`, clamped to the valid ranges.
pub fn jitter_transform(nominal: &Transform, jitter: &Jitter, rng: &mut Rng) -> Transform {
    if *jitter == Jitter::NONE {
        return *nominal;
    }
    let axis = loop {
        let v = [rng::normal_f64(rng), rng::normal_f64(rng), rng::normal_f64(rng)];
        if geometry::norm(v) > 1e-9 {
            break v;
        }
    };
    let angle = jitter.rotation_deg.to_radians() * rng::unit_f64(rng);
    let rotation = Quaternion::from_axis_angle(axis, angle).mul(&nominal.rotation).normalized();
    let mut translation = nominal.translation;
    for t in &mut translation {
        let d = rng::uniform_f64(rng, -jitter.translation, jitter.translation);
        *t = (*t + d).clamp(-TRANSLATION_BOUND, TRANSLATION_BOUND);
    }
    let f = 1.0 + rng::uniform_f64(rng, -jitter.scale, jitter.scale);
    let scale = (nominal.scale * f).clamp(SCALE_RANGE.0, SCALE_RANGE.1);
    Transform { rotation, translation, scale }
}

/// Instantiates `template` with `m_total` points.
///
/// Point selection depends only on the template, so with zero jitter every
/// seed yields the same cloud.
pub fn instantiate_detailed(
    template: &ClassTemplate,
    pool: &ShapePool,
    m_total: usize,
    seed: u64,
) -> Result<Instance> {
    template.validate()?;
    if m_total == 0 {
        return param_err("m_total must be >= 1");
    }
    let mut rng = rng::rng_at(seed, &[template.id as u64]);
    let mut parts = Vec::with_capacity(template.elements.len());
    let mut points: Vec<Vec3> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    for (ei, e) in template.elements.iter().enumerate() {
        let candidates = pool.of_kind(e.kind);
        if candidates.is_empty() {
            return config_err(format!(
                "template {} needs a {:?} but the shape pool has none",
                template.id, e.kind
            ));
        }
        let entry = candidates[e.slot % candidates.len()];
        let tf = jitter_transform(&e.nominal, &template.jitter, &mut rng);
        let moved = apply_transform(&entry.cloud, &tf)?;
        owner.extend(std::iter::repeat_n(ei, moved.len()));
        points.extend(moved.points);
        parts.push((entry.params, tf));
    }
    let mut pick_rng = rng::rng_at(template.id as u64, &[m_total as u64, 0x5e1ec7]);
    let chosen: Vec<usize> = if points.len() >= m_total {
        rng::sample_without_replacement(&mut pick_rng, points.len(), m_total)
    } else {
        let mut all: Vec<usize> = (0..points.len()).collect();
        while all.len() < m_total {
            all.push(rng::uniform_index(&mut pick_rng, points.len()));
        }
        all
    };
    let raw = PointCloud::new(chosen.iter().map(|&i| points[i]).collect());
    let provenance = chosen.iter().map(|&i| owner[i]).collect();
    let mut cloud = raw.clone();
    cloud.normalize();
    Ok(Instance { cloud, label: template.id, recipe: AssemblyRecipe { parts }, provenance, raw })
}

pub fn instantiate(
    template: &ClassTemplate,
    pool: &ShapePool,
    m_total: usize,
    seed: u64,
) -> Result<(PointCloud, u32)> {
    let inst = instantiate_detailed(template, pool, m_total, seed)?;
    Ok((inst.cloud, inst.label))
}

/// Seed of sample `index` of template `template_id` within a dataset.
pub fn sample_seed(seed: u64, template_id: u32, index: usize) -> u64 {
    rng::derive(seed, &[template_id as u64, index as u64])
}

/// Generated samples in template order, `samples_per_class` each.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub clouds: Vec<PointCloud>,
    pub labels: Vec<u32>,
}

pub fn generate_dataset(
    templates: &[ClassTemplate],
    pool: &ShapePool,
    samples_per_class: usize,
    m: usize,
    seed: u64,
) -> Result<GeneratedSet> {
    let mut seen = BTreeSet::new();
    for t in templates {
        if !seen.insert(t.id) {
            return config_err(format!("duplicate template id {}", t.id));
        }
    }
    let mut clouds = Vec::with_capacity(templates.len() * samples_per_class);
    let mut labels = Vec::with_capacity(clouds.capacity());
    for t in templates {
        for i in 0..samples_per_class {
            let (pc, label) = instantiate(t, pool, m, sample_seed(seed, t.id, i))?;
            clouds.push(pc);
            labels.push(label);
        }
    }
    Ok(GeneratedSet { clouds, labels })
}

/// Bounds for random template generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateConfig {
    pub min_elements: usize,
    pub max_elements: usize,
    pub kinds: Vec<ShapeKind>,
    /// Number of pool slots per kind a template may reference.
    pub slots_per_kind: usize,
    pub jitter: Jitter,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            min_elements: 2,
            max_elements: 6,
            kinds: ShapeKind::ALL.to_vec(),
            slots_per_kind: 8,
            jitter: Jitter::default(),
        }
    }
}

pub fn random_transform(rng: &mut Rng) -> Transform {
    let b = TRANSLATION_BOUND;
    Transform {
        rotation: Quaternion::random(rng),
        translation: [
            rng::uniform_f64(rng, -b, b),
            rng::uniform_f64(rng, -b, b),
            rng::uniform_f64(rng, -b, b),
        ],
        scale: rng::uniform_f64(rng, SCALE_RANGE.0, SCALE_RANGE.1),
    }
}

/// Draws a random template: element count, kinds, pool slots and nominal
/// transforms are all seeded by `(seed, id)`.
pub fn random_template(id: u32, config: &TemplateConfig, seed: u64) -> Result<ClassTemplate> {
    let (lo, hi) = (config.min_elements, config.max_elements);
    if lo == 0 || lo > hi || hi > MAX_ELEMENTS || config.kinds.is_empty() || config.slots_per_kind == 0 {
        return config_err(format!("invalid template config {config:?}"));
    }
    let mut rng = rng::rng_at(seed, &[id as u64, 0x7e3]);
    let n = lo + rng::uniform_index(&mut rng, hi - lo + 1);
    let elements = (0..n)
        .map(|_| ElementRule {
            kind: config.kinds[rng::uniform_index(&mut rng, config.kinds.len())],
            slot: rng::uniform_index(&mut rng, config.slots_per_kind),
            nominal: random_transform(&mut rng),
        })
        .collect();
    let t = ClassTemplate { id, elements, jitter: config.jitter };
    t.validate()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_shape_pool, PoolConfig};

    fn pool() -> ShapePool {
        build_shape_pool(&PoolConfig { per_kind: 2, points_per_shape: 256, ..Default::default() }, 3)
            .unwrap()
    }

    #[test]
    fn normalized_output() {
        let pool = pool();
        let t = random_template(4, &TemplateConfig::default(), 1).unwrap();
        let (pc, label) = instantiate(&t, &pool, 300, 8).unwrap();
        assert_eq!(label, 4);
        assert_eq!(pc.len(), 300);
        let c = pc.centroid();
        assert!(geometry::norm(c) < 1e-9);
        assert!((pc.max_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_jitter_is_seed_independent() {
        let pool = pool();
        let mut t = random_template(2, &TemplateConfig::default(), 5).unwrap();
        t.jitter = Jitter::NONE;
        let a = instantiate(&t, &pool, 200, 1).unwrap();
        let b = instantiate(&t, &pool, 200, 2).unwrap();
        assert_eq!(a.0, b.0);
        t.jitter = Jitter::default();
        let a = instantiate(&t, &pool, 200, 1).unwrap();
        let b = instantiate(&t, &pool, 200, 2).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn missing_kind_is_config_error() {
        let cfg = PoolConfig { kinds: vec![ShapeKind::Cone], per_kind: 1, points_per_shape: 16, ..Default::default() };
        let pool = build_shape_pool(&cfg, 0).unwrap();
        let t = ClassTemplate {
            id: 0,
            elements: vec![ElementRule { kind: ShapeKind::Cylinder, slot: 0, nominal: Transform::IDENTITY }],
            jitter: Jitter::NONE,
        };
        assert!(matches!(instantiate(&t, &pool, 16, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn element_count_limits() {
        let rule = ElementRule { kind: ShapeKind::Cone, slot: 0, nominal: Transform::IDENTITY };
        let t = ClassTemplate { id: 0, elements: vec![rule; 9], jitter: Jitter::NONE };
        assert!(t.validate().is_err());
        let t = ClassTemplate { id: 0, elements: vec![], jitter: Jitter::NONE };
        assert!(t.validate().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let pool = pool();
        let t = random_template(1, &TemplateConfig::default(), 0).unwrap();
        assert!(generate_dataset(&[t.clone(), t], &pool, 1, 32, 0).is_err());
    }

    #[test]
    fn jitter_stays_within_bounds() {
        let mut rng = rng::rng_from(11);
        for _ in 0..200 {
            let nominal = random_transform(&mut rng);
            let j = jitter_transform(&nominal, &Jitter::default(), &mut rng);
            j.validate().unwrap();
            let rel = j.rotation.mul(&nominal.rotation.conjugate());
            let angle = 2.0 * rel.0[0].abs().min(1.0).acos();
            assert!(angle <= 15f64.to_radians() + 1e-9);
        }
    }
}
