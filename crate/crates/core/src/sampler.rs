//! Query selection under the annotation budget.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::supervoxel::Partition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Allocation {
    PerScene,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub total_n: usize,
    pub iterations_k: usize,
    pub allocation: Allocation,
    /// Number of scenes; 0 in a config means "all scenes of the dataset".
    pub scenes_s: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { total_n: 20, iterations_k: 5, allocation: Allocation::PerScene, scenes_s: 0 }
    }
}

/// Per-iteration quotas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Quotas {
    /// One quota per scene, in scene order.
    PerScene(Vec<usize>),
    /// A single quota ranked across all scenes.
    Pooled(usize),
}

impl Quotas {
    pub fn total(&self) -> usize {
        match self {
            Quotas::PerScene(q) => q.iter().sum(),
            Quotas::Pooled(m) => *m,
        }
    }
}

/// `total / parts` with the remainder spread one each over the first slots.
fn split(total: usize, parts: usize, index: usize) -> usize {
    total / parts + usize::from(index < total % parts)
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_k == 0 || self.scenes_s == 0 {
            return Err(Error::InvalidParameter("budget needs k >= 1 and s >= 1".into()));
        }
        Ok(())
    }

    /// `m` for a 1-based iteration.
    pub fn per_iteration(&self, iteration: usize) -> usize {
        split(self.total_n, self.iterations_k, iteration - 1)
    }
}

/// Quotas for a 1-based iteration.
///
/// Per-scene mode first splits `n` over scenes (extra points to the lowest
/// scene ids), then each scene's share over iterations (extra points to the
/// first iterations).
pub fn allocate(budget: &Budget, iteration: usize) -> Result<Quotas> {
    budget.validate()?;
    if iteration == 0 || iteration > budget.iterations_k {
        return Err(Error::InvalidParameter(format!(
            "iteration {iteration} outside 1..={}",
            budget.iterations_k
        )));
    }
    Ok(match budget.allocation {
        Allocation::Global => Quotas::Pooled(budget.per_iteration(iteration)),
        Allocation::PerScene => Quotas::PerScene(
            (0..budget.scenes_s)
                .map(|j| split(split(budget.total_n, budget.scenes_s, j), budget.iterations_k, iteration - 1))
                .collect(),
        ),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    UncertaintyWeighted,
    TopM,
    Random,
    #[serde(rename = "1t1c")]
    OneThingOneClick,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub scene: String,
    pub point: u32,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub iteration: u32,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub queries: Vec<Query>,
}

fn default_strategy() -> Strategy {
    Strategy::Random
}

impl QuerySet {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("query set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Selection inputs for one scene.
#[derive(Clone, Copy)]
pub struct Candidates<'a> {
    pub partition: &'a Partition,
    /// Per-point selection weights; `None` means uniform.
    pub uncertainty: Option<&'a [f64]>,
    /// Super-voxels that already carry an annotation.
    pub annotated: &'a BTreeSet<u32>,
    /// Instance ids and the instances already sampled, for instance-distinct selection.
    pub instances: Option<(&'a [u32], &'a BTreeSet<u32>)>,
}

impl<'a> Candidates<'a> {
    pub fn new(partition: &'a Partition, annotated: &'a BTreeSet<u32>) -> Self {
        Candidates { partition, uncertainty: None, annotated, instances: None }
    }

    pub fn with_uncertainty(mut self, u: &'a [f64]) -> Self {
        self.uncertainty = Some(u);
        self
    }

    pub fn with_instances(mut self, instances: &'a [u32], sampled: &'a BTreeSet<u32>) -> Self {
        self.instances = Some((instances, sampled));
        self
    }

    fn u(&self, i: usize) -> f64 {
        self.uncertainty.map_or(0.0, |u| u[i])
    }

    fn validate(&self) -> Result<()> {
        let n = self.partition.len();
        if let Some(u) = self.uncertainty {
            if u.len() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: u.len() });
            }
        }
        if let Some((inst, _)) = self.instances {
            if inst.len() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: inst.len() });
            }
        }
        Ok(())
    }
}

/// Eligibility masks for a pool of scenes during one selection round.
struct Pool<'a> {
    scenes: &'a [Candidates<'a>],
    eligible: Vec<Vec<bool>>,
    taken_instances: Vec<BTreeSet<u32>>,
}

impl<'a> Pool<'a> {
    fn new(scenes: &'a [Candidates<'a>]) -> Result<Self> {
        let mut eligible = Vec::with_capacity(scenes.len());
        for c in scenes {
            c.validate()?;
            let mask = (0..c.partition.len())
                .map(|i| {
                    !c.annotated.contains(&(c.partition.supervoxel_of(i) as u32))
                        && c.instances.is_none_or(|(inst, sampled)| !sampled.contains(&inst[i]))
                })
                .collect();
            eligible.push(mask);
        }
        Ok(Pool { scenes, eligible, taken_instances: vec![BTreeSet::new(); scenes.len()] })
    }

    fn available(&self) -> usize {
        self.scenes
            .iter()
            .zip(&self.eligible)
            .map(|(c, mask)| {
                let units: BTreeSet<u32> = (0..mask.len())
                    .filter(|&i| mask[i])
                    .map(|i| match c.instances {
                        Some((inst, _)) => inst[i],
                        None => c.partition.supervoxel_of(i) as u32,
                    })
                    .collect();
                units.len()
            })
            .sum()
    }

    fn take(&mut self, scene: usize, point: usize) {
        let c = &self.scenes[scene];
        let mask = &mut self.eligible[scene];
        for &m in c.partition.members(c.partition.supervoxel_of(point)) {
            mask[m as usize] = false;
        }
        if let Some((inst, _)) = c.instances {
            let id = inst[point];
            self.taken_instances[scene].insert(id);
            for (i, e) in mask.iter_mut().enumerate() {
                if inst[i] == id {
                    *e = false;
                }
            }
        }
    }

    fn eligible_points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.eligible
            .iter()
            .enumerate()
            .flat_map(|(s, mask)| mask.iter().enumerate().filter(|(_, &e)| e).map(move |(i, _)| (s, i)))
    }
}

fn check_available(pool: &Pool, m: usize) -> Result<()> {
    let available = pool.available();
    if available < m {
        return Err(Error::Insufficient { needed: m, available });
    }
    Ok(())
}

/// Sequential draws without replacement, each proportional to the point's
/// weight among eligible points. Equal or all-zero weights fall back to
/// uniform draws.
fn draw_weighted(pool: &mut Pool, m: usize, rng: &mut seed::Rng) -> Result<Vec<(usize, u32)>> {
    check_available(pool, m)?;
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let mut total = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut count = 0usize;
        for (s, i) in pool.eligible_points() {
            let w = pool.scenes[s].u(i).max(0.0);
            total += w;
            lo = lo.min(w);
            hi = hi.max(w);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Insufficient { needed: m, available: out.len() });
        }
        let uniform = !(total > 0.0) || lo == hi;
        let mass = if uniform { count as f64 } else { total };
        let target = rng.random::<f64>() * mass;
        let mut acc = 0.0;
        let mut chosen = None;
        let mut last = None;
        for (s, i) in pool.eligible_points() {
            let w = if uniform { 1.0 } else { pool.scenes[s].u(i).max(0.0) };
            if w > 0.0 {
                last = Some((s, i));
            }
            acc += w;
            if target < acc {
                chosen = Some((s, i));
                break;
            }
        }
        // rounding can leave `target` at the very end of the mass
        let (s, i) = chosen.or(last).expect("positive mass");
        pool.take(s, i);
        out.push((s, i as u32));
    }
    Ok(out)
}

/// Highest weight first, ties by scene order then point index.
fn take_top(pool: &mut Pool, m: usize) -> Result<Vec<(usize, u32)>> {
    check_available(pool, m)?;
    let mut order: Vec<(usize, usize)> = pool.eligible_points().collect();
    order.sort_by(|&(sa, ia), &(sb, ib)| {
        pool.scenes[sb].u(ib).total_cmp(&pool.scenes[sa].u(ia)).then(sa.cmp(&sb)).then(ia.cmp(&ib))
    });
    let mut out = Vec::with_capacity(m);
    for (s, i) in order {
        if out.len() == m {
            break;
        }
        if pool.eligible[s][i] {
            pool.take(s, i);
            out.push((s, i as u32));
        }
    }
    if out.len() < m {
        return Err(Error::Insufficient { needed: m, available: out.len() });
    }
    Ok(out)
}

/// Select `m` points across a pool of scenes. Returned pairs are
/// `(scene position in pool, point index)` in draw order.
pub fn select_pooled(scenes: &[Candidates], m: usize, strategy: Strategy, seed: u64) -> Result<Vec<(usize, u32)>> {
    let mut pool = Pool::new(scenes)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut rng = seed::rng(seed);
    match strategy {
        Strategy::UncertaintyWeighted => draw_weighted(&mut pool, m, &mut rng),
        Strategy::Random => {
            let uniform: Vec<Candidates> = scenes.iter().map(|c| Candidates { uncertainty: None, ..*c }).collect();
            let mut pool = Pool::new(&uniform)?;
            draw_weighted(&mut pool, m, &mut rng)
        }
        Strategy::TopM | Strategy::OneThingOneClick => take_top(&mut pool, m),
    }
}

fn single(c: Candidates, m: usize, strategy: Strategy, seed: u64) -> Result<Vec<u32>> {
    Ok(select_pooled(&[c], m, strategy, seed)?.into_iter().map(|(_, p)| p).collect())
}

/// `m` points drawn uniformly over points of unannotated super-voxels, at most
/// one per super-voxel.
pub fn select_random(partition: &Partition, annotated: &BTreeSet<u32>, m: usize, seed: u64) -> Result<Vec<u32>> {
    single(Candidates::new(partition, annotated), m, Strategy::Random, seed)
}

/// `m` points by uncertainty, at most one per super-voxel.
pub fn select_uncertain(
    uncertainty: &[f64],
    partition: &Partition,
    annotated: &BTreeSet<u32>,
    m: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<u32>> {
    single(Candidates::new(partition, annotated).with_uncertainty(uncertainty), m, strategy, seed)
}

/// `m` points from distinct, not yet sampled instances: repeatedly the most
/// uncertain eligible point, masking its instance.
pub fn select_1t1c(
    uncertainty: &[f64],
    partition: &Partition,
    annotated: &BTreeSet<u32>,
    instances: &[u32],
    sampled: &BTreeSet<u32>,
    m: usize,
) -> Result<Vec<u32>> {
    let c = Candidates::new(partition, annotated).with_uncertainty(uncertainty).with_instances(instances, sampled);
    single(c, m, Strategy::OneThingOneClick, 0)
}

/// `m` random points from distinct, not yet sampled instances.
pub fn select_random_instances(
    partition: &Partition,
    annotated: &BTreeSet<u32>,
    instances: &[u32],
    sampled: &BTreeSet<u32>,
    m: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    single(Candidates::new(partition, annotated).with_instances(instances, sampled), m, Strategy::Random, seed)
}

/// One point for each instance not yet sampled: its most uncertain eligible
/// point (ties to the lowest index). Instances are visited in ascending id;
/// an instance whose points all sit in annotated super-voxels is skipped.
pub fn final_sweep_1t1c(
    uncertainty: &[f64],
    partition: &Partition,
    annotated: &BTreeSet<u32>,
    instances: &[u32],
    sampled: &BTreeSet<u32>,
) -> Result<Vec<u32>> {
    let c = Candidates::new(partition, annotated).with_uncertainty(uncertainty).with_instances(instances, sampled);
    let scenes = [c];
    let mut pool = Pool::new(&scenes)?;
    let remaining: BTreeSet<u32> = instances.iter().copied().filter(|i| !sampled.contains(i)).collect();
    let mut out = Vec::new();
    for inst in remaining {
        let best = (0..instances.len())
            .filter(|&i| instances[i] == inst && pool.eligible[0][i])
            .min_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
        if let Some(p) = best {
            pool.take(0, p);
            out.push(p as u32);
        }
    }
    Ok(out)
}
