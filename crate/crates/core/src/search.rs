//! Architecture search: evolutionary (large spaces) and exhaustive (small spaces).
//!
//! Every ranking in this module orders by fitness descending and breaks ties
//! by the smaller subnet encoding.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaloracle::OracleTable;
use crate::partition::{write_csv, Router};
use crate::seed;
use crate::space::{CostMetric, SearchSpace, Subnet};
use crate::supernet::SupernetStore;
use crate::training::{evaluate, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub metric: CostMetric,
    pub max: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvoConfig {
    pub population: usize,
    pub generations: usize,
    pub parents_top: usize,
    pub mutation_prob: f64,
    pub crossover_count: usize,
    pub mutation_count: usize,
    /// Attempts per child (and per initial member) before giving up.
    pub retry_budget: usize,
    pub constraint: Option<Constraint>,
    pub seed: u64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population: 50,
            generations: 20,
            parents_top: 10,
            mutation_prob: 0.1,
            crossover_count: 25,
            mutation_count: 25,
            retry_budget: 100,
            constraint: None,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population != self.crossover_count + self.mutation_count {
            return Err(Error::Config(format!(
                "population {} must equal crossover_count {} + mutation_count {}",
                self.population, self.crossover_count, self.mutation_count
            )));
        }
        if self.parents_top == 0 || self.parents_top > self.population {
            return Err(Error::Config(format!("parents_top must be in 1..={}", self.population)));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::Config(format!("mutation_prob {} outside [0, 1]", self.mutation_prob)));
        }
        if self.generations == 0 || self.retry_budget == 0 {
            return Err(Error::Config("generations and retry_budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub subnet: Subnet,
    pub code: u64,
    pub fitness: f64,
    /// Constrained metric value, or FLOPs when unconstrained.
    pub cost: u64,
}

fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness.total_cmp(&a.fitness).then(a.code.cmp(&b.code))
}

pub trait Fitness: Sync {
    fn fitness(&self, subnet: &Subnet) -> Result<f64>;
}

impl<F: Fn(&Subnet) -> Result<f64> + Sync> Fitness for F {
    fn fitness(&self, subnet: &Subnet) -> Result<f64> {
        self(subnet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessKind {
    /// Top-1 accuracy in percent.
    Accuracy,
    /// Negated mean cross-entropy.
    NegLoss,
}

/// Validation fitness with weights inherited from the subnet's supernet.
pub struct SupernetFitness<'a> {
    store: &'a SupernetStore<f32>,
    router: &'a Router,
    val: &'a Dataset,
    batch_size: usize,
    kind: FitnessKind,
}

impl<'a> SupernetFitness<'a> {
    /// Refuses a store trained under a different partition.
    pub fn new(
        store: &'a SupernetStore<f32>,
        router: &'a Router,
        val: &'a Dataset,
        batch_size: usize,
        kind: FitnessKind,
    ) -> Result<Self> {
        store.check_router(router)?;
        val.check_space(router.space())?;
        Ok(SupernetFitness { store, router, val, batch_size, kind })
    }
}

impl Fitness for SupernetFitness<'_> {
    fn fitness(&self, subnet: &Subnet) -> Result<f64> {
        let r = evaluate(self.store, self.router, subnet, self.val, self.batch_size)?;
        Ok(match self.kind {
            FitnessKind::Accuracy => 100.0 * r.accuracy,
            FitnessKind::NegLoss => -r.loss,
        })
    }
}

/// Looks fitness up in an oracle table.
pub struct OracleFitness<'a> {
    pub space: &'a SearchSpace,
    pub table: &'a OracleTable,
    pub dataset: &'a str,
}

impl Fitness for OracleFitness<'_> {
    fn fitness(&self, subnet: &Subnet) -> Result<f64> {
        let code = self.space.encode(subnet)?;
        self.table
            .get(self.dataset, code)
            .map(|r| r.accuracy)
            .ok_or_else(|| Error::Integrity(format!("oracle has no row for subnet {code} in {:?}", self.dataset)))
    }
}

/// Each edge independently moves to a different op with probability `prob`.
pub fn mutate<R: Rng + ?Sized>(space: &SearchSpace, subnet: &Subnet, prob: f64, rng: &mut R) -> Subnet {
    let mut out = subnet.clone();
    for (c, e) in out.choices.iter_mut().zip(&space.edges) {
        let arity = e.arity();
        if arity > 1 && rng.random_bool(prob) {
            let r = rng.random_range(0..arity - 1);
            *c = if r >= *c { r + 1 } else { r };
        }
    }
    out
}

/// Uniform crossover: each edge copies parent `a` or `b` with probability 1/2.
pub fn crossover<R: Rng + ?Sized>(a: &Subnet, b: &Subnet, rng: &mut R) -> Subnet {
    let choices = a
        .choices
        .iter()
        .zip(&b.choices)
        .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
        .collect();
    Subnet { choices }
}

fn cost(space: &SearchSpace, subnet: &Subnet, constraint: Option<Constraint>) -> Result<u64> {
    space.cost(subnet, constraint.map_or(CostMetric::Flops, |c| c.metric))
}

fn feasible(space: &SearchSpace, subnet: &Subnet, constraint: Option<Constraint>) -> Result<bool> {
    Ok(match constraint {
        Some(c) => space.cost(subnet, c.metric)? <= c.max,
        None => true,
    })
}

fn evaluate_all(
    space: &SearchSpace,
    fitness: &dyn Fitness,
    subnets: Vec<Subnet>,
    constraint: Option<Constraint>,
) -> Result<Vec<Candidate>> {
    subnets
        .into_par_iter()
        .map(|s| {
            let f = fitness.fitness(&s)?;
            if f.is_nan() {
                return Err(Error::Numerical(format!("NaN fitness for {:?}", s.choices)));
            }
            Ok(Candidate { code: space.encode(&s)?, cost: cost(space, &s, constraint)?, fitness: f, subnet: s })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub generation: usize,
    pub rank: usize,
    pub subnet_code: u64,
    pub fitness: f64,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Candidate,
    /// Per generation: the ranked pool of surviving parents plus new children.
    pub history: Vec<HistoryRow>,
    pub evaluations: usize,
}

impl SearchOutcome {
    /// Best fitness seen up to and including each generation.
    pub fn best_per_generation(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in self.history.iter().filter(|r| r.rank == 0) {
            out.push(r.fitness);
        }
        out
    }

    pub fn write_history(&self, path: &Path, header: &str) -> Result<()> {
        write_csv(path, header, &self.history)
    }
}

struct Visited<'a> {
    space: &'a SearchSpace,
    constraint: Option<Constraint>,
    seen: HashSet<u64>,
}

impl Visited<'_> {
    /// Marks and accepts a subnet that is new and satisfies the constraint.
    fn admit(&mut self, s: &Subnet) -> Result<bool> {
        let code = self.space.encode(s)?;
        if self.seen.contains(&code) || !feasible(self.space, s, self.constraint)? {
            return Ok(false);
        }
        self.seen.insert(code);
        Ok(true)
    }
}

fn push_history(history: &mut Vec<HistoryRow>, generation: usize, pool: &[Candidate]) {
    history.extend(pool.iter().enumerate().map(|(rank, c)| HistoryRow {
        generation,
        rank,
        subnet_code: c.code,
        fitness: c.fitness,
        cost: c.cost,
    }));
}

/// Elitist evolutionary search. Generation 0 is a constrained uniform sample
/// of `population` distinct subnets; each later generation breeds
/// `mutation_count` mutants and `crossover_count` crossovers from the current
/// top `parents_top`. Subnets are never evaluated twice.
pub fn evolutionary_search(space: &SearchSpace, fitness: &dyn Fitness, evo: &EvoConfig) -> Result<SearchOutcome> {
    evo.validate()?;
    let mut rng = seed::rng(seed::derive(evo.seed, "evolution"));
    let mut visited = Visited { space, constraint: evo.constraint, seen: HashSet::new() };

    let mut initial = Vec::new();
    for _ in 0..evo.retry_budget * evo.population {
        if initial.len() == evo.population {
            break;
        }
        let s = space.random_subnet(&mut rng);
        if visited.admit(&s)? {
            initial.push(s);
        }
    }
    if initial.is_empty() {
        return Err(Error::Infeasible(format!(
            "no subnet satisfies {:?} after {} draws",
            evo.constraint,
            evo.retry_budget * evo.population
        )));
    }
    if initial.len() < evo.population {
        log::warn!("only {} distinct feasible subnets found for the initial population", initial.len());
    }
    let mut pool = evaluate_all(space, fitness, initial, evo.constraint)?;
    let mut evaluations = pool.len();
    pool.sort_by(rank_order);
    let mut history = Vec::new();
    push_history(&mut history, 0, &pool);

    for generation in 1..evo.generations {
        pool.truncate(evo.parents_top);
        let parents = pool.clone();
        let mut children = Vec::new();
        for _ in 0..evo.mutation_count {
            for _ in 0..evo.retry_budget {
                let p = &parents[rng.random_range(0..parents.len())];
                let c = mutate(space, &p.subnet, evo.mutation_prob, &mut rng);
                if visited.admit(&c)? {
                    children.push(c);
                    break;
                }
            }
        }
        for _ in 0..evo.crossover_count {
            for _ in 0..evo.retry_budget {
                let a = &parents[rng.random_range(0..parents.len())];
                let b = &parents[rng.random_range(0..parents.len())];
                let c = crossover(&a.subnet, &b.subnet, &mut rng);
                if visited.admit(&c)? {
                    children.push(c);
                    break;
                }
            }
        }
        evaluations += children.len();
        pool.extend(evaluate_all(space, fitness, children, evo.constraint)?);
        pool.sort_by(rank_order);
        push_history(&mut history, generation, &pool);
    }
    let best = pool.into_iter().next().expect("nonempty pool");
    Ok(SearchOutcome { best, history, evaluations })
}

/// Evaluate every feasible subnet and return the best.
pub fn exhaustive_search(
    space: &SearchSpace,
    fitness: &dyn Fitness,
    constraint: Option<Constraint>,
    limit: u64,
) -> Result<Candidate> {
    let mut feasible_set = Vec::new();
    for s in space.enumerate(limit)? {
        if feasible(space, &s, constraint)? {
            feasible_set.push(s);
        }
    }
    if feasible_set.is_empty() {
        return Err(Error::Infeasible(format!("no subnet satisfies {constraint:?}")));
    }
    let all = evaluate_all(space, fitness, feasible_set, constraint)?;
    Ok(all.into_iter().min_by(rank_order).expect("nonempty"))
}

/// Final search result document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub encoding: u64,
    pub ops: Vec<String>,
    pub arch: Option<String>,
    pub fitness: f64,
    pub cost: u64,
    pub cost_metric: CostMetric,
    pub constraint: Option<Constraint>,
    pub partition_hash: String,
    pub seed: u64,
}

impl SearchResult {
    pub fn new(space: &SearchSpace, best: &Candidate, constraint: Option<Constraint>, partition_hash: &str, seed: u64) -> Self {
        SearchResult {
            encoding: best.code,
            ops: space.op_names(&best.subnet),
            arch: space.arch_string(&best.subnet).ok(),
            fitness: best.fitness,
            cost: best.cost,
            cost_metric: constraint.map_or(CostMetric::Flops, |c| c.metric),
            constraint,
            partition_hash: partition_hash.to_string(),
            seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaloracle::SyntheticOracle;
    use proptest::prelude::*;

    fn oracle(space: &SearchSpace, seed_: u64) -> OracleTable {
        SyntheticOracle { seed: seed_, ..Default::default() }.build(space, "toy", 20_000).unwrap()
    }

    #[test]
    fn mutate_edge_cases() {
        let space = SearchSpace::nas201();
        let mut rng = seed::rng(0);
        for _ in 0..200 {
            let s = space.random_subnet(&mut rng);
            assert_eq!(mutate(&space, &s, 0.0, &mut rng), s);
            let m = mutate(&space, &s, 1.0, &mut rng);
            assert!(m.choices.iter().zip(&s.choices).all(|(a, b)| a != b));
            space.check_subnet(&m).unwrap();
        }
    }

    #[test]
    fn mutate_expected_changes() {
        let space = SearchSpace::nas201();
        let mut rng = seed::rng(1);
        let (trials, p, m) = (10_000, 0.1, space.num_edges() as f64);
        let s = space.decode(777).unwrap();
        let changed: usize = (0..trials)
            .map(|_| mutate(&space, &s, p, &mut rng).choices.iter().zip(&s.choices).filter(|(a, b)| a != b).count())
            .sum();
        let mean = changed as f64 / trials as f64;
        let sd = (m * p * (1.0 - p) / trials as f64).sqrt();
        assert!((mean - p * m).abs() <= 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn crossover_properties() {
        let space = SearchSpace::nas201();
        let mut rng = seed::rng(2);
        let a = space.decode(0).unwrap();
        let b = space.decode(15624).unwrap();
        assert_eq!(crossover(&a, &a, &mut rng), a);
        let trials = 10_000;
        let mut from_a = vec![0usize; space.num_edges()];
        for _ in 0..trials {
            let c = crossover(&a, &b, &mut rng);
            for (j, &x) in c.choices.iter().enumerate() {
                assert!(x == a.choices[j] || x == b.choices[j]);
                from_a[j] += (x == a.choices[j]) as usize;
            }
        }
        let sd = (0.25 / trials as f64).sqrt();
        for f in from_a {
            assert!((f as f64 / trials as f64 - 0.5).abs() <= 3.0 * sd);
        }
    }

    #[test]
    fn evolution_matches_exhaustive_on_small_space() {
        let space = SearchSpace::desk27();
        let t = oracle(&space, 5);
        let fit = OracleFitness { space: &space, table: &t, dataset: "toy" };
        let exact = exhaustive_search(&space, &fit, None, 100).unwrap();
        assert_eq!(exact.code, t.best("toy").unwrap().0);
        for s in 0..3 {
            let out = evolutionary_search(&space, &fit, &EvoConfig { seed: s, ..Default::default() }).unwrap();
            assert_eq!(out.best, exact);
            assert!(out.evaluations <= 27);
        }
    }

    #[test]
    fn elitism_and_determinism() {
        let space = SearchSpace::nas201();
        let t = oracle(&space, 1);
        let fit = OracleFitness { space: &space, table: &t, dataset: "toy" };
        let evo = EvoConfig { seed: 4, generations: 6, ..Default::default() };
        let a = evolutionary_search(&space, &fit, &evo).unwrap();
        let b = evolutionary_search(&space, &fit, &evo).unwrap();
        assert_eq!(a, b);
        let best = a.best_per_generation();
        assert_eq!(best.len(), 6);
        assert!(best.windows(2).all(|w| w[1] >= w[0]));
        let codes: HashSet<u64> = a.history.iter().map(|r| r.subnet_code).collect();
        assert_eq!(codes.len(), a.evaluations);
    }

    #[test]
    fn constraint_is_respected_and_infeasible_detected() {
        let space = SearchSpace::nas201();
        let t = oracle(&space, 2);
        let fit = OracleFitness { space: &space, table: &t, dataset: "toy" };
        let costs: Vec<u64> = space.enumerate(20_000).unwrap().map(|s| space.flops(&s, 1).unwrap()).collect();
        let min = *costs.iter().min().unwrap();
        let max = *costs.iter().max().unwrap();
        let cap = min + (max - min) / 3;
        let c = Constraint { metric: CostMetric::Flops, max: cap };
        let out = evolutionary_search(&space, &fit, &EvoConfig { constraint: Some(c), generations: 5, ..Default::default() })
            .unwrap();
        assert!(out.history.iter().all(|r| r.cost <= cap));
        let ex = exhaustive_search(&space, &fit, Some(c), 20_000).unwrap();
        assert!(ex.cost <= cap);

        let none = Constraint { metric: CostMetric::Flops, max: min - 1 };
        let e = evolutionary_search(&space, &fit, &EvoConfig { constraint: Some(none), ..Default::default() });
        assert!(matches!(e, Err(Error::Infeasible(_))));
        assert!(matches!(exhaustive_search(&space, &fit, Some(none), 20_000), Err(Error::Infeasible(_))));
    }

    #[test]
    fn exhaustive_tie_break_and_limits() {
        let space = SearchSpace::desk27();
        let flat = |_: &Subnet| Ok(1.0);
        assert_eq!(exhaustive_search(&space, &flat, None, 100).unwrap().code, 0);
        assert!(matches!(exhaustive_search(&space, &flat, None, 10), Err(Error::TooLarge { .. })));
        // One edge, two ops; the FLOPs cap leaves skip_connect as the only feasible subnet.
        let two = SearchSpace::from_toml_str(
            "name = 's'\nnum_nodes = 2\ncell_repeats = 1\nchannel_plan = [4]\ninput_shape = [3, 4, 4]\nnum_classes = 2\nops = ['skip_connect', 'nor_conv_3x3']\nedges = [{ from = 0, to = 1 }]\n",
        )
        .unwrap();
        let cap = Constraint { metric: CostMetric::Flops, max: two.flops(&Subnet::new(vec![0]), 1).unwrap() };
        let higher_for_conv = |s: &Subnet| Ok(s.choices[0] as f64);
        assert_eq!(exhaustive_search(&two, &higher_for_conv, Some(cap), 10).unwrap().code, 0);
        let out = evolutionary_search(&two, &higher_for_conv, &EvoConfig { constraint: Some(cap), ..Default::default() })
            .unwrap();
        assert_eq!(out.best.code, 0);
        assert_eq!(out.evaluations, 1);
    }

    #[test]
    fn config_validation() {
        assert!(EvoConfig::default().validate().is_ok());
        assert!(EvoConfig { population: 40, ..Default::default() }.validate().is_err());
        assert!(EvoConfig { parents_top: 51, ..Default::default() }.validate().is_err());
        assert!(EvoConfig { mutation_prob: 1.5, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn children_stay_in_space(seed_ in any::<u64>(), a in 0u64..15625, b in 0u64..15625, p in 0.0f64..=1.0) {
            let space = SearchSpace::nas201();
            let mut rng = seed::rng(seed_);
            let (a, b) = (space.decode(a).unwrap(), space.decode(b).unwrap());
            let m = mutate(&space, &a, p, &mut rng);
            prop_assert!(space.check_subnet(&m).is_ok());
            let c = crossover(&a, &b, &mut rng);
            prop_assert!(space.check_subnet(&c).is_ok());
        }
    }
}
