//! Ground-truth stand-alone accuracies and rank-correlation reports.

mod kendall;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kendall::{kendall_counts, kendall_tau, KendallCounts};

use crate::error::{Error, Result};
use crate::partition::{median, write_csv, Router};
use crate::seed;
use crate::space::{SearchSpace, Subnet};
use crate::supernet::SupernetStore;
use crate::training::{evaluate, train_standalone, Dataset, TrainConfig};

pub const ORACLE_COLUMNS: [&str; 5] = ["encoding", "dataset", "accuracy", "flops", "params"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    /// Stand-alone top-1 accuracy in percent.
    pub accuracy: f64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    encoding: u64,
    dataset: &'a str,
    accuracy: f64,
    flops: u64,
    params: u64,
}

/// Subnet encoding -> stand-alone result, per named dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleTable {
    rows: BTreeMap<String, BTreeMap<u64, OracleRow>>,
    pub provenance: String,
}

impl OracleTable {
    pub fn new(provenance: impl Into<String>) -> Self {
        OracleTable { rows: BTreeMap::new(), provenance: provenance.into() }
    }

    pub fn insert(&mut self, dataset: &str, code: u64, row: OracleRow) -> Result<()> {
        if !(0.0..=100.0).contains(&row.accuracy) {
            return Err(Error::Validation(format!("accuracy {} outside [0, 100]", row.accuracy)));
        }
        let table = self.rows.entry(dataset.to_string()).or_default();
        if table.contains_key(&code) {
            return Err(Error::Integrity(format!("duplicate encoding {code} for dataset {dataset:?}")));
        }
        table.insert(code, row);
        Ok(())
    }

    pub fn get(&self, dataset: &str, code: u64) -> Option<&OracleRow> {
        self.rows.get(dataset)?.get(&code)
    }

    pub fn dataset(&self, dataset: &str) -> Option<&BTreeMap<u64, OracleRow>> {
        self.rows.get(dataset)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    /// The only dataset, or `name` if given.
    pub fn pick_dataset<'a>(&'a self, name: Option<&'a str>) -> Result<&'a str> {
        match name {
            Some(n) if self.rows.contains_key(n) => Ok(n),
            Some(n) => Err(Error::Usage(format!("oracle has no dataset {n:?}"))),
            None => {
                let mut it = self.datasets();
                match (it.next(), it.next()) {
                    (Some(d), None) => Ok(d),
                    (None, _) => Err(Error::Usage("oracle table is empty".into())),
                    _ => Err(Error::Usage("oracle has several datasets; pick one explicitly".into())),
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.rows.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Highest-accuracy row of a dataset; ties go to the smaller encoding.
    pub fn best(&self, dataset: &str) -> Option<(u64, OracleRow)> {
        let mut best: Option<(u64, OracleRow)> = None;
        for (&code, row) in self.rows.get(dataset)? {
            if best.is_none_or(|(_, b)| row.accuracy > b.accuracy) {
                best = Some((code, *row));
            }
        }
        best
    }

    /// Every encoding must be a valid subnet code of `space`.
    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        let n = space.size()?;
        for (d, rows) in &self.rows {
            if let Some((&code, _)) = rows.range(n..).next() {
                return Err(Error::Integrity(format!(
                    "dataset {d:?}: encoding {code} outside space {} of size {n}",
                    space.name
                )));
            }
        }
        Ok(())
    }

    /// Parse a CSV with header `encoding,dataset,accuracy,flops,params`;
    /// lines starting with `#` are comments.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::read(file)?;
        table.provenance = format!("csv:{}", path.display());
        Ok(table)
    }

    pub fn read(input: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers().map_err(|e| parse_err(&e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ORACLE_COLUMNS {
            return Err(Error::Parse {
                line: headers.position().map_or(1, |p| p.line()),
                msg: format!("expected header {}, got {}", ORACLE_COLUMNS.join(","), headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut table = OracleTable::new("csv");
        for rec in rdr.records() {
            let rec = rec.map_err(|e| parse_err(&e))?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |what: &str| Error::Parse { line, msg: format!("bad {what} {:?}", field(ORACLE_COLUMNS.iter().position(|c| *c == what).unwrap_or(0))) };
            let code: u64 = field(0).parse().map_err(|_| bad("encoding"))?;
            let dataset = field(1);
            if dataset.is_empty() {
                return Err(Error::Parse { line, msg: "empty dataset name".into() });
            }
            let accuracy: f64 = field(2).parse().map_err(|_| bad("accuracy"))?;
            if !(0.0..=100.0).contains(&accuracy) {
                return Err(Error::Parse { line, msg: format!("accuracy {accuracy} outside [0, 100]") });
            }
            let flops: u64 = field(3).parse().map_err(|_| bad("flops"))?;
            let params: u64 = field(4).parse().map_err(|_| bad("params"))?;
            table.insert(dataset, code, OracleRow { accuracy, flops, params }).map_err(|e| match e {
                Error::Integrity(m) => Error::Integrity(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let rows: Vec<CsvRow> = self
            .rows
            .iter()
            .flat_map(|(d, rows)| {
                rows.iter().map(move |(&encoding, r)| CsvRow {
                    encoding,
                    dataset: d,
                    accuracy: r.accuracy,
                    flops: r.flops,
                    params: r.params,
                })
            })
            .collect();
        if rows.is_empty() {
            use std::io::Write;
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            for line in header.lines() {
                writeln!(f, "# {line}").map_err(|e| Error::io(path, e))?;
            }
            return writeln!(f, "{}", ORACLE_COLUMNS.join(",")).map_err(|e| Error::io(path, e));
        }
        write_csv(path, header, &rows)
    }
}

fn parse_err(e: &csv::Error) -> Error {
    Error::Parse { line: e.position().map_or(0, |p| p.line()), msg: e.to_string() }
}

/// Synthetic ground truth: additive per-edge op effects plus pairwise edge
/// interactions and per-subnet noise, affinely mapped onto
/// `[floor, ceiling]` so the best subnet scores exactly `ceiling`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub seed: u64,
    pub floor: f64,
    pub ceiling: f64,
    pub interaction: f64,
    pub noise: f64,
}

impl Default for SyntheticOracle {
    fn default() -> Self {
        SyntheticOracle { seed: 0, floor: 10.0, ceiling: 94.37, interaction: 0.3, noise: 0.1 }
    }
}

impl SyntheticOracle {
    pub fn build(&self, space: &SearchSpace, dataset: &str, limit: u64) -> Result<OracleTable> {
        if !(0.0..=self.ceiling).contains(&self.floor) || self.ceiling > 100.0 {
            return Err(Error::Validation(format!("need 0 <= floor <= ceiling <= 100, got {self:?}")));
        }
        let mut rng = seed::rng(seed::derive(self.seed, "synthetic-oracle"));
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let main: Vec<Vec<f64>> = space
            .edges
            .iter()
            .map(|e| {
                e.candidates
                    .iter()
                    .map(|op| unit.sample(&mut rng) + op.nonlinearity_count as f64)
                    .collect()
            })
            .collect();
        let m = space.num_edges();
        let mut pair = BTreeMap::new();
        for i in 0..m {
            for j in i + 1..m {
                for a in 0..space.edges[i].arity() {
                    for b in 0..space.edges[j].arity() {
                        pair.insert((i, a, j, b), self.interaction * unit.sample(&mut rng));
                    }
                }
            }
        }
        let mut raw = Vec::new();
        for s in space.enumerate(limit)? {
            let c = &s.choices;
            let mut v: f64 = c.iter().enumerate().map(|(j, &o)| main[j][o]).sum();
            for i in 0..m {
                for j in i + 1..m {
                    v += pair[&(i, c[i], j, c[j])];
                }
            }
            let code = space.encode(&s)?;
            v += self.noise * unit.sample(&mut seed::rng(seed::derive_index(self.seed, code)));
            raw.push((code, v, space.flops(&s, 1)?, space.param_count(&s, 1)?));
        }
        let lo = raw.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { (self.ceiling - self.floor) / (hi - lo) } else { 0.0 };
        let mut table = OracleTable::new(format!("synthetic:seed={}", self.seed));
        for (code, v, flops, params) in raw {
            let acc = if v == hi { self.ceiling } else { (self.floor + (v - lo) * scale).min(self.ceiling) };
            table.insert(dataset, code, OracleRow { accuracy: acc, flops, params })?;
        }
        Ok(table)
    }
}

/// Stand-alone training protocol for a small-space oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandaloneProtocol {
    pub train: TrainConfig,
    /// Training seeds; the recorded accuracy is the mean over seeds.
    pub seeds: Vec<u64>,
    pub eval_batch: usize,
}

impl StandaloneProtocol {
    pub fn desk(seeds: Vec<u64>) -> Self {
        StandaloneProtocol { train: TrainConfig { epochs: 10, ..TrainConfig::desk() }, seeds, eval_batch: 256 }
    }
}

/// Largest space `build_desk_oracle` accepts.
pub const DESK_ORACLE_LIMIT: u64 = 256;

/// Train every subnet from scratch and record its mean test accuracy (percent).
pub fn build_desk_oracle(
    space: &SearchSpace,
    train: &Dataset,
    test: &Dataset,
    protocol: &StandaloneProtocol,
    dataset: &str,
) -> Result<OracleTable> {
    if protocol.seeds.is_empty() {
        return Err(Error::Config("stand-alone protocol needs at least one seed".into()));
    }
    let subnets: Vec<_> = space.enumerate(DESK_ORACLE_LIMIT)?.collect();
    let jobs: Vec<(usize, u64)> =
        (0..subnets.len()).flat_map(|i| protocol.seeds.iter().map(move |&s| (i, s))).collect();
    let accs: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let cfg = TrainConfig { seed: s, ..protocol.train };
            let (store, router) = train_standalone(space, &subnets[i], train, &cfg)?;
            Ok(evaluate(&store, &router, &subnets[i], test, protocol.eval_batch)?.accuracy)
        })
        .collect();
    let mut sums = vec![0.0; subnets.len()];
    for (&(i, _), a) in jobs.iter().zip(accs) {
        sums[i] += a?;
    }
    let seeds: Vec<String> = protocol.seeds.iter().map(u64::to_string).collect();
    let mut table = OracleTable::new(format!(
        "standalone:epochs={},seeds={}",
        protocol.train.epochs,
        seeds.join("/")
    ));
    for (s, sum) in subnets.iter().zip(sums) {
        let acc = 100.0 * sum / protocol.seeds.len() as f64;
        let row = OracleRow { accuracy: acc, flops: space.flops(s, 1)?, params: space.param_count(s, 1)? };
        table.insert(dataset, space.encode(s)?, row)?;
    }
    Ok(table)
}

/// Supernet-estimated accuracy of one subnet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub code: u64,
    pub accuracy: f64,
    pub supernet: usize,
}

/// Inherited-weight accuracy (percent) of each subnet on `val`.
pub fn supernet_estimates(
    store: &SupernetStore<f32>,
    router: &Router,
    subnets: &[Subnet],
    val: &Dataset,
    batch_size: usize,
) -> Result<Vec<Estimate>> {
    store.check_router(router)?;
    subnets
        .par_iter()
        .map(|s| {
            Ok(Estimate {
                code: router.space().encode(s)?,
                accuracy: 100.0 * evaluate(store, router, s, val, batch_size)?.accuracy,
                supernet: router.route(s)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScatterRow {
    pub subnet_code: u64,
    pub oracle_acc: f64,
    pub estimated_acc: f64,
    pub supernet_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupernetMedian {
    pub supernet_k: usize,
    pub count: usize,
    pub oracle_median: f64,
    pub estimated_median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub n: usize,
    pub tau_all: f64,
    /// Effective M after clamping to the number of shared subnets.
    pub top_m: usize,
    /// `None` when tau is undefined on the top-M subset (all tied).
    pub tau_top_m: Option<f64>,
    pub medians: Vec<SupernetMedian>,
    /// Sorted by subnet code.
    pub scatter: Vec<ScatterRow>,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    n: usize,
    top_m: usize,
    tau_all: f64,
    tau_top_m: Option<f64>,
}

/// Kendall tau-b between estimates and the oracle, over all subnets and over
/// the oracle's top-M, plus per-supernet oracle-accuracy medians.
pub fn rank_report(estimates: &[Estimate], oracle: &OracleTable, dataset: &str, top_m: usize) -> Result<RankReport> {
    let rows = oracle.dataset(dataset).ok_or_else(|| Error::Usage(format!("oracle has no dataset {dataset:?}")))?;
    if estimates.is_empty() {
        return Err(Error::Validation("no estimates to compare".into()));
    }
    let mut seen = BTreeSet::new();
    let mut scatter = Vec::with_capacity(estimates.len());
    for e in estimates {
        if !seen.insert(e.code) {
            return Err(Error::Validation(format!("duplicate estimate for subnet {}", e.code)));
        }
        let row = rows
            .get(&e.code)
            .ok_or_else(|| Error::Validation(format!("subnet {} has no oracle row in {dataset:?}", e.code)))?;
        scatter.push(ScatterRow {
            subnet_code: e.code,
            oracle_acc: row.accuracy,
            estimated_acc: e.accuracy,
            supernet_k: e.supernet,
        });
    }
    scatter.sort_by_key(|r| r.subnet_code);
    let n = scatter.len();
    let tau = |rows: &[ScatterRow]| {
        let x: Vec<f64> = rows.iter().map(|r| r.estimated_acc).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.oracle_acc).collect();
        kendall_tau(&x, &y)
    };
    let tau_all = tau(&scatter)?;
    let m = if top_m > n {
        log::warn!("top-M {top_m} exceeds the {n} shared subnets; clamped to {n}");
        n
    } else {
        top_m
    };
    let mut ranked = scatter.clone();
    ranked.sort_by(|a, b| b.oracle_acc.total_cmp(&a.oracle_acc).then(a.subnet_code.cmp(&b.subnet_code)));
    ranked.truncate(m);
    let tau_top_m = if m >= 2 { tau(&ranked).ok() } else { None };

    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &scatter {
        let g = groups.entry(r.supernet_k).or_default();
        g.0.push(r.oracle_acc);
        g.1.push(r.estimated_acc);
    }
    let medians = groups
        .into_iter()
        .map(|(k, (mut o, mut e))| SupernetMedian {
            supernet_k: k,
            count: o.len(),
            oracle_median: median(&mut o).unwrap_or(f64::NAN),
            estimated_median: median(&mut e).unwrap_or(f64::NAN),
        })
        .collect();
    Ok(RankReport { n, tau_all, top_m: m, tau_top_m, medians, scatter })
}

impl RankReport {
    pub fn write_scatter(&self, path: &Path, header: &str) -> Result<()> {
        write_csv(path, header, &self.scatter)
    }

    pub fn write_summary(&self, path: &Path, header: &str) -> Result<()> {
        let row = SummaryRow { n: self.n, top_m: self.top_m, tau_all: self.tau_all, tau_top_m: self.tau_top_m };
        write_csv(path, header, &[row])
    }

    pub fn write_medians(&self, path: &Path, header: &str) -> Result<()> {
        write_csv(path, header, &self.medians)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{synthetic, SyntheticSpec};

    const CSV: &str = "# provenance line\nencoding,dataset,accuracy,flops,params\n0,c10,50.5,10,2\n1,c10,60,12,3\n0,c100,20,10,2\n";

    #[test]
    fn parse_csv() {
        let t = OracleTable::read(CSV.as_bytes()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.get("c10", 1).unwrap().accuracy, 60.0);
        assert_eq!(t.best("c10").unwrap().0, 1);
        assert!(t.pick_dataset(None).is_err());
        assert_eq!(t.pick_dataset(Some("c100")).unwrap(), "c100");
    }

    #[test]
    fn header_only_is_empty() {
        let t = OracleTable::read("encoding,dataset,accuracy,flops,params\n".as_bytes()).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn duplicates_and_parse_errors() {
        let dup = "encoding,dataset,accuracy,flops,params\n3,c10,1,1,1\n3,c10,2,1,1\n";
        assert!(matches!(OracleTable::read(dup.as_bytes()), Err(Error::Integrity(_))));
        let bad = "encoding,dataset,accuracy,flops,params\n3,c10,1,1,1\nx,c10,2,1,1\n";
        assert!(matches!(OracleTable::read(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let range = "encoding,dataset,accuracy,flops,params\n3,c10,101,1,1\n";
        assert!(matches!(OracleTable::read(range.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let short = "encoding,dataset,accuracy,flops,params\n3,c10,1\n";
        assert!(matches!(OracleTable::read(short.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(OracleTable::read("a,b\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let t = OracleTable::read(CSV.as_bytes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.csv");
        t.write_csv(&p, "seed: 1").unwrap();
        let mut back = OracleTable::load(&p).unwrap();
        back.provenance = t.provenance.clone();
        assert_eq!(back, t);
    }

    #[test]
    fn synthetic_oracle_plants_the_maximum() {
        let space = SearchSpace::desk27();
        let t = SyntheticOracle { seed: 3, ..Default::default() }.build(&space, "toy", 100).unwrap();
        assert_eq!(t.dataset("toy").unwrap().len(), 27);
        let (_, best) = t.best("toy").unwrap();
        assert_eq!(best.accuracy, 94.37);
        assert!(t.dataset("toy").unwrap().values().all(|r| (10.0..=94.37).contains(&r.accuracy)));
        let again = SyntheticOracle { seed: 3, ..Default::default() }.build(&space, "toy", 100).unwrap();
        assert_eq!(t, again);
    }

    fn identity_estimates(t: &OracleTable) -> Vec<Estimate> {
        t.dataset("toy").unwrap().iter().map(|(&code, r)| Estimate { code, accuracy: r.accuracy, supernet: (code % 3) as usize }).collect()
    }

    #[test]
    fn report_identity_and_top2() {
        let space = SearchSpace::desk27();
        let t = SyntheticOracle::default().build(&space, "toy", 100).unwrap();
        let est = identity_estimates(&t);
        let r = rank_report(&est, &t, "toy", 2).unwrap();
        assert_eq!(r.tau_all, 1.0);
        assert_eq!(r.tau_top_m, Some(1.0));
        assert_eq!(r.medians.len(), 3);
        assert_eq!(r.medians.iter().map(|m| m.count).sum::<usize>(), 27);

        let flipped: Vec<Estimate> = est.iter().map(|e| Estimate { accuracy: -e.accuracy, ..*e }).collect();
        let r = rank_report(&flipped, &t, "toy", 2).unwrap();
        assert_eq!(r.tau_top_m, Some(-1.0));
        let r = rank_report(&est, &t, "toy", 1000).unwrap();
        assert_eq!(r.top_m, 27);
    }

    #[test]
    fn report_is_permutation_invariant() {
        let space = SearchSpace::desk27();
        let t = SyntheticOracle::default().build(&space, "toy", 100).unwrap();
        let mut est: Vec<Estimate> = identity_estimates(&t)
            .into_iter()
            .map(|e| Estimate { accuracy: (e.code * 7 % 11) as f64, ..e })
            .collect();
        let a = rank_report(&est, &t, "toy", 10).unwrap();
        est.reverse();
        est.swap(3, 17);
        let b = rank_report(&est, &t, "toy", 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_errors() {
        let space = SearchSpace::desk27();
        let t = SyntheticOracle::default().build(&space, "toy", 100).unwrap();
        assert!(rank_report(&[], &t, "toy", 5).is_err());
        let e = Estimate { code: 999, accuracy: 1.0, supernet: 0 };
        assert!(rank_report(&[e], &t, "toy", 5).is_err());
        assert!(matches!(rank_report(&identity_estimates(&t), &t, "nope", 5), Err(Error::Usage(_))));
    }

    #[test]
    fn desk_oracle_is_deterministic() {
        // One-edge space keeps this fast.
        let space = SearchSpace::from_toml_str(
            "name = 'one'\nnum_nodes = 2\ncell_repeats = 1\nchannel_plan = [4]\ninput_shape = [3, 6, 6]\nnum_classes = 3\nops = ['skip_connect', 'nor_conv_3x3']\nedges = [{ from = 0, to = 1 }]\n",
        )
        .unwrap();
        let spec = SyntheticSpec { train_per_class: 12, test_per_class: 6, ..SyntheticSpec::for_space(&space, 1) };
        let (tr, te) = synthetic(&spec).unwrap();
        let proto = StandaloneProtocol {
            train: TrainConfig { epochs: 1, batch_size: 12, ..TrainConfig::desk() },
            seeds: vec![0, 1],
            eval_batch: 9,
        };
        let a = build_desk_oracle(&space, &tr, &te, &proto, "toy").unwrap();
        let b = build_desk_oracle(&space, &tr, &te, &proto, "toy").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }
}
