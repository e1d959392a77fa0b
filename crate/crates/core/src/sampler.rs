//! Repeat-factor dataset balancing and the two-phase training schedule.
//!
//! Each dataset of `n` training samples is repeated `max(1, target / n)`
//! times (integer division, `target = 120_000` by default). Factors are
//! computed once from the full catalog; phases only decide which datasets
//! are eligible. Per phase the sample pool is the concatenation, in dataset
//! name order, of each included dataset's indices `0..n` repeated `factor`
//! times. Pool cycle `c` of phase `p` is that base order shuffled with
//! Fisher-Yates on [`RngStream`] `(seed, DOMAIN_SCHEDULE, p << 32 | c)`.
//! Batches are consecutive slices of the phase's concatenated cycles, so a
//! batch may straddle two cycles.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize, Serializer};

use crate::catalog::{Catalog, Manifest, Split};
use crate::error::{Error, Result};
use crate::rng::{RngStream, DOMAIN_SCHEDULE, GENERATOR};

pub const DEFAULT_TARGET_SIZE: u64 = 120_000;
pub const DEFAULT_TOTAL_ITERS: u64 = 80_000;
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Datasets held out of the first half of training.
pub const LATE_DATASETS: [&str; 2] = ["BDD", "IDD"];

/// `max(1, target / n)`.
pub fn repeat_factor(target: u64, n: u64) -> Result<u64> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    Ok((target / n).max(1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatPlan {
    pub target_size: u64,
    pub factors: BTreeMap<String, u64>,
}

impl RepeatPlan {
    pub fn from_sizes(sizes: &BTreeMap<String, u64>, target_size: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Argument("no datasets to balance".into()));
        }
        let factors = sizes
            .iter()
            .map(|(k, &n)| Ok((k.clone(), repeat_factor(target_size, n)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            target_size,
            factors,
        })
    }
}

/// Repeat factors from the catalog's expected train counts.
pub fn build_repeat_plan(catalog: &Catalog, target_size: u64) -> Result<RepeatPlan> {
    RepeatPlan::from_sizes(&catalog_sizes(catalog), target_size)
}

pub fn catalog_sizes(catalog: &Catalog) -> BTreeMap<String, u64> {
    catalog
        .datasets
        .iter()
        .map(|d| (d.name.clone(), d.train_count))
        .collect()
}

/// Train-split record counts per dataset.
pub fn manifest_sizes(manifest: &Manifest) -> BTreeMap<String, u64> {
    manifest
        .counts()
        .into_iter()
        .filter(|(_, c)| c.get(Split::Train) > 0)
        .map(|(k, c)| (k, c.get(Split::Train)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub start_iter: u64,
    pub end_iter: u64,
    pub included_datasets: BTreeSet<String>,
}

/// `[0, total/2)` without BDD and IDD, then `[total/2, total)` with everything.
pub fn default_phases<'a>(datasets: impl IntoIterator<Item = &'a str>, total_iters: u64) -> Vec<PhaseSpec> {
    let all: BTreeSet<String> = datasets.into_iter().map(str::to_string).collect();
    let early = all
        .iter()
        .filter(|d| !LATE_DATASETS.contains(&d.as_str()))
        .cloned()
        .collect();
    let half = total_iters / 2;
    vec![
        PhaseSpec {
            start_iter: 0,
            end_iter: half,
            included_datasets: early,
        },
        PhaseSpec {
            start_iter: half,
            end_iter: total_iters,
            included_datasets: all,
        },
    ]
}

/// Optimizer settings recorded with a plan; nothing here is executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub lr_schedule: String,
    pub warmup_iters: u64,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            optimizer: "AdamW".into(),
            learning_rate: 6e-5,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            lr_schedule: "poly".into(),
            warmup_iters: 1500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PoolItem {
    dataset: u16,
    index: u32,
}

/// One drawn sample: dataset name and index into its train split.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BatchItem {
    pub dataset: Arc<str>,
    pub index: u64,
}

impl Serialize for BatchItem {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (&*self.dataset, self.index).serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchSpec {
    pub iter: u64,
    pub items: Vec<BatchItem>,
}

/// On-disk form of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub generator: String,
    pub seed: u64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub phases: Vec<PhaseSpec>,
    pub target_size: u64,
    pub repeat_factors: BTreeMap<String, u64>,
    pub dataset_sizes: BTreeMap<String, u64>,
    pub training_meta: TrainingMeta,
}

type CycleKey = (usize, u64);

#[derive(Debug)]
pub struct TrainSchedule {
    plan: PlanFile,
    names: Vec<Arc<str>>,
    pools: Vec<Vec<PoolItem>>,
    cache: Mutex<Vec<(CycleKey, Arc<Vec<PoolItem>>)>>,
}

impl PartialEq for TrainSchedule {
    fn eq(&self, other: &Self) -> bool {
        self.plan == other.plan
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleParams {
    pub total_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub phases: Option<Vec<PhaseSpec>>,
    pub training_meta: TrainingMeta,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            total_iters: DEFAULT_TOTAL_ITERS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            phases: None,
            training_meta: TrainingMeta::default(),
        }
    }
}

/// Build a schedule from per-dataset train sizes and a repeat plan.
pub fn build_schedule(
    sizes: &BTreeMap<String, u64>,
    plan: &RepeatPlan,
    params: &ScheduleParams,
) -> Result<TrainSchedule> {
    let phases = params
        .phases
        .clone()
        .unwrap_or_else(|| default_phases(sizes.keys().map(String::as_str), params.total_iters));
    TrainSchedule::from_plan(PlanFile {
        generator: GENERATOR.to_string(),
        seed: params.seed,
        total_iters: params.total_iters,
        batch_size: params.batch_size,
        phases,
        target_size: plan.target_size,
        repeat_factors: plan.factors.clone(),
        dataset_sizes: sizes.clone(),
        training_meta: params.training_meta.clone(),
    })
}

impl TrainSchedule {
    pub fn from_plan(plan: PlanFile) -> Result<Self> {
        if plan.generator != GENERATOR {
            return Err(Error::Schedule(format!(
                "plan uses generator {}, this build implements {GENERATOR}",
                plan.generator
            )));
        }
        if plan.batch_size == 0 || plan.total_iters == 0 {
            return Err(Error::Schedule("batch size and iteration count must be positive".into()));
        }
        let mut expected_start = 0;
        for p in &plan.phases {
            if p.start_iter != expected_start || p.end_iter <= p.start_iter {
                return Err(Error::Schedule(format!(
                    "phase [{}, {}) does not continue from iteration {expected_start}",
                    p.start_iter, p.end_iter
                )));
            }
            expected_start = p.end_iter;
        }
        if expected_start != plan.total_iters {
            return Err(Error::Schedule(format!(
                "phases cover [0, {expected_start}) but training runs {} iterations",
                plan.total_iters
            )));
        }
        let names: Vec<Arc<str>> = plan.dataset_sizes.keys().map(|k| Arc::from(k.as_str())).collect();
        if names.len() > u16::MAX as usize {
            return Err(Error::Schedule("too many datasets".into()));
        }
        let mut pools = Vec::with_capacity(plan.phases.len());
        for (pi, phase) in plan.phases.iter().enumerate() {
            let mut pool = Vec::new();
            for name in &phase.included_datasets {
                let Some(di) = names.iter().position(|n| &**n == name) else {
                    return Err(Error::Schedule(format!("phase {pi} includes unknown dataset {name}")));
                };
                let n = plan.dataset_sizes[name];
                let factor = *plan.repeat_factors.get(name).ok_or_else(|| {
                    Error::Schedule(format!("no repeat factor for dataset {name}"))
                })?;
                if n > u32::MAX as u64 {
                    return Err(Error::Schedule(format!("dataset {name} is too large")));
                }
                for _ in 0..factor {
                    pool.extend((0..n as u32).map(|index| PoolItem {
                        dataset: di as u16,
                        index,
                    }));
                }
            }
            if pool.is_empty() {
                return Err(Error::Schedule(format!("phase {pi} has an empty sample pool")));
            }
            pools.push(pool);
        }
        Ok(Self {
            plan,
            names,
            pools,
            cache: Mutex::new(Vec::new()),
        })
    }

    pub fn plan(&self) -> &PlanFile {
        &self.plan
    }

    pub fn total_iters(&self) -> u64 {
        self.plan.total_iters
    }

    pub fn batch_size(&self) -> usize {
        self.plan.batch_size
    }

    pub fn phases(&self) -> &[PhaseSpec] {
        &self.plan.phases
    }

    pub fn repeat_factors(&self) -> &BTreeMap<String, u64> {
        &self.plan.repeat_factors
    }

    pub fn phase_of(&self, iter: u64) -> Option<usize> {
        self.plan
            .phases
            .iter()
            .position(|p| p.start_iter <= iter && iter < p.end_iter)
    }

    /// Items in one pool cycle of `phase`.
    pub fn pool_len(&self, phase: usize) -> usize {
        self.pools[phase].len()
    }

    fn cycle(&self, phase: usize, cycle: u64) -> Arc<Vec<PoolItem>> {
        let key = (phase, cycle);
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some((_, v)) = cache.iter().find(|(k, _)| *k == key) {
            return Arc::clone(v);
        }
        let mut pool = self.pools[phase].clone();
        let stream = ((phase as u64) << 32) | cycle;
        RngStream::new(self.plan.seed, DOMAIN_SCHEDULE, stream).shuffle(&mut pool);
        let pool = Arc::new(pool);
        if cache.len() >= 2 {
            cache.remove(0);
        }
        cache.push((key, Arc::clone(&pool)));
        pool
    }

    /// The `k`-th item drawn in `phase`, counting from the phase start.
    pub fn item_at(&self, phase: usize, k: u64) -> BatchItem {
        let len = self.pools[phase].len() as u64;
        let cycle = self.cycle(phase, k / len);
        let it = cycle[(k % len) as usize];
        BatchItem {
            dataset: Arc::clone(&self.names[it.dataset as usize]),
            index: it.index as u64,
        }
    }

    /// Batch of iteration `iter`; a pure function of the plan and `iter`.
    pub fn next_batch(&self, iter: u64) -> Result<BatchSpec> {
        let phase = self.phase_of(iter).ok_or_else(|| {
            Error::Argument(format!(
                "iteration {iter} outside [0, {})",
                self.plan.total_iters
            ))
        })?;
        let bs = self.plan.batch_size as u64;
        let first = (iter - self.plan.phases[phase].start_iter) * bs;
        let items = (first..first + bs).map(|k| self.item_at(phase, k)).collect();
        Ok(BatchSpec { iter, items })
    }

    pub fn batches(&self) -> impl Iterator<Item = BatchSpec> + '_ {
        (0..self.plan.total_iters).map(|i| self.next_batch(i).expect("iteration in range"))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.plan).expect("plan serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_plan(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::builtin_catalog;

    #[test]
    fn factor_examples() {
        assert_eq!(repeat_factor(120_000, 2975).unwrap(), 40);
        assert_eq!(repeat_factor(120_000, 118_287).unwrap(), 1);
        assert_eq!(repeat_factor(120_000, 13_367).unwrap(), 8);
        assert_eq!(repeat_factor(120_000, 120_000).unwrap(), 1);
        assert_eq!(repeat_factor(120_000, 500_000).unwrap(), 1);
        assert!(repeat_factor(120_000, 0).is_err());
    }

    #[test]
    fn factor_bracket_oracle() {
        // f*n <= target < (f+1)*n whenever n <= target
        for n in [1u64, 7, 2975, 13_367, 20_210, 119_999, 120_000] {
            let f = repeat_factor(120_000, n).unwrap();
            assert!(f * n <= 120_000 && 120_000 < (f + 1) * n, "n={n}");
        }
    }

    #[test]
    fn builtin_plan() {
        let plan = build_repeat_plan(&builtin_catalog(), DEFAULT_TARGET_SIZE).unwrap();
        let expect: BTreeMap<String, u64> = [
            ("COCO", 1),
            ("ADE20K", 5),
            ("Cityscapes", 40),
            ("Vistas", 6),
            ("BDD", 17),
            ("IDD", 17),
            ("WildDash2", 35),
            ("ScanNet", 6),
            ("VIPER", 8),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        assert_eq!(plan.factors, expect);
    }

    #[test]
    fn training_meta_defaults() {
        let m = TrainingMeta::default();
        assert_eq!(m.learning_rate, 6e-5);
        assert_eq!(m.weight_decay, 0.01);
        assert_eq!(m.betas, [0.9, 0.999]);
        assert_eq!(m.warmup_iters, 1500);
    }

    fn tiny() -> TrainSchedule {
        let sizes: BTreeMap<String, u64> =
            [("A", 3u64), ("BDD", 2), ("IDD", 1)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let plan = RepeatPlan::from_sizes(&sizes, 6).unwrap();
        build_schedule(
            &sizes,
            &plan,
            &ScheduleParams {
                total_iters: 20,
                batch_size: 4,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn tiny_schedule_respects_phases() {
        let s = tiny();
        for b in s.batches() {
            assert_eq!(b.items.len(), 4);
            if b.iter < 10 {
                assert!(b.items.iter().all(|i| &*i.dataset == "A"));
            }
        }
        assert_eq!(s.next_batch(5).unwrap(), s.next_batch(5).unwrap());
        assert!(s.next_batch(20).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let s = tiny();
        let back = TrainSchedule::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.next_batch(17).unwrap(), s.next_batch(17).unwrap());
    }

    #[test]
    fn bad_phases_rejected() {
        let sizes: BTreeMap<String, u64> = [("A".to_string(), 3u64)].into();
        let plan = RepeatPlan::from_sizes(&sizes, 6).unwrap();
        let gap = vec![PhaseSpec {
            start_iter: 1,
            end_iter: 10,
            included_datasets: ["A".to_string()].into(),
        }];
        let params = ScheduleParams {
            total_iters: 10,
            batch_size: 2,
            phases: Some(gap),
            ..Default::default()
        };
        assert!(matches!(build_schedule(&sizes, &plan, &params), Err(Error::Schedule(_))));
        let empty = vec![PhaseSpec {
            start_iter: 0,
            end_iter: 10,
            included_datasets: BTreeSet::new(),
        }];
        let params = ScheduleParams {
            phases: Some(empty),
            ..params
        };
        assert!(matches!(build_schedule(&sizes, &plan, &params), Err(Error::Schedule(_))));
    }
}
