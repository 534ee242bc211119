//! Splitting a search space into K disjoint subspaces, one per supernet.
//!
//! Subnets are scored by a criterion (nonlinearity count by default) and the
//! score histogram is cut into K contiguous bins of roughly equal mass. A score
//! value is never split across bins, so subnets with equal scores always share
//! a supernet.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaloracle::OracleTable;
use crate::seed;
use crate::space::{SearchSpace, Subnet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    NonlinearCount,
    Flops,
    LinearRegions,
}

impl std::str::FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlinear_count" | "nonlinear" => Ok(CriterionKind::NonlinearCount),
            "flops" => Ok(CriterionKind::Flops),
            "linear_regions" => Ok(CriterionKind::LinearRegions),
            other => Err(Error::Config(format!("unknown criterion '{other}'"))),
        }
    }
}

/// Probe batch used by the linear-regions criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Criterion {
    pub kind: CriterionKind,
    pub probe: Option<ProbeSpec>,
}

impl Criterion {
    pub fn nonlinear_count() -> Self {
        Criterion { kind: CriterionKind::NonlinearCount, probe: None }
    }

    pub fn flops() -> Self {
        Criterion { kind: CriterionKind::Flops, probe: None }
    }

    pub fn linear_regions(samples: usize, seed: u64) -> Self {
        Criterion { kind: CriterionKind::LinearRegions, probe: Some(ProbeSpec { samples, seed }) }
    }

    pub fn needs_forward_pass(&self) -> bool {
        self.kind == CriterionKind::LinearRegions
    }
}

/// Forward-pass provider for criteria that need one.
pub trait ProbeEngine: Send + Sync {
    /// Distinct binary ReLU activation patterns over the probe batch.
    fn linear_regions(&self, space: &SearchSpace, subnet: &Subnet) -> Result<usize>;
}

pub fn score(
    criterion: &Criterion,
    space: &SearchSpace,
    subnet: &Subnet,
    probe: Option<&dyn ProbeEngine>,
) -> Result<f64> {
    match criterion.kind {
        CriterionKind::NonlinearCount => Ok(space.count_nonlinearities(subnet)? as f64),
        CriterionKind::Flops => Ok(space.flops(subnet, 1)? as f64),
        CriterionKind::LinearRegions => {
            let probe = probe.ok_or_else(|| {
                Error::Config("linear-regions criterion needs a probe engine".into())
            })?;
            Ok(probe.linear_regions(space, subnet)? as f64)
        }
    }
}

/// Persisted split of a search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub space: String,
    pub space_size: u64,
    pub criterion: Criterion,
    pub k: usize,
    /// Upper score edge of bins 0..K-1 (K-1 values, increasing).
    pub bin_edges: Vec<f64>,
    /// Subnets per bin; exact counts when `exact`, sample counts otherwise.
    pub subspace_sizes: Vec<u64>,
    pub exact: bool,
    /// Observed (min, max) score; `None` for a single bin.
    pub score_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl Partition {
    /// Single bin covering the whole space (the one-shot setting).
    pub fn single(space: &SearchSpace, criterion: Criterion) -> Result<Self> {
        let n = space.size()?;
        Ok(Partition {
            space: space.name.clone(),
            space_size: n,
            criterion,
            k: 1,
            bin_edges: Vec::new(),
            subspace_sizes: vec![n],
            exact: true,
            score_range: None,
            seed: 0,
        })
    }

    /// Bin lookup: smallest bin whose upper edge is >= score; total on all scores.
    pub fn assign(&self, score: f64) -> usize {
        if self.score_range.is_some_and(|(lo, hi)| score < lo || score > hi) {
            log::debug!("score {score} outside observed range {:?}; clamped", self.score_range);
        }
        self.bin_edges.iter().position(|&e| score <= e).unwrap_or(self.k - 1)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("partition serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Partition = serde_json::from_str(&text)?;
        if p.k == 0 || p.bin_edges.len() + 1 != p.k || p.subspace_sizes.len() != p.k {
            return Err(Error::Integrity(format!("{}: inconsistent partition", path.display())));
        }
        Ok(p)
    }

    /// Check this partition was built for `space`.
    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        if self.space != space.name || self.space_size != space.size()? {
            return Err(Error::Config(format!(
                "partition was built for space '{}' ({} subnets), got '{}'",
                self.space,
                self.space_size,
                space.name
            )));
        }
        Ok(())
    }
}

/// Last value index of each bin for a greedy equal-mass contiguous split of
/// `counts` (the histogram over sorted distinct scores) into `k` bins.
pub fn equal_mass_bins(counts: &[u64], k: usize) -> Vec<usize> {
    let m = counts.len();
    assert!(k >= 1 && k <= m, "need 1 <= k <= distinct values");
    let total: u64 = counts.iter().sum();
    let mut ends = Vec::with_capacity(k);
    let mut cum = 0u64;
    for i in 0..m {
        cum += counts[i];
        let b = ends.len();
        if b == k - 1 {
            continue;
        }
        let remaining = m - 1 - i;
        let bins_after = k - 1 - b;
        if remaining == bins_after {
            ends.push(i);
            continue;
        }
        let target = total as f64 * (b + 1) as f64 / k as f64;
        let next = (cum + counts[i + 1]) as f64;
        if (cum as f64 - target).abs() <= (next - target).abs() {
            ends.push(i);
        }
    }
    ends.push(m - 1);
    ends
}

/// Sorted distinct values with multiplicities.
pub fn histogram(scores: &[f64]) -> Vec<(f64, u64)> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, u64)> = Vec::new();
    for s in sorted {
        match out.last_mut() {
            Some((v, c)) if *v == s => *c += 1,
            _ => out.push((s, 1)),
        }
    }
    out
}

/// Score subnets either exhaustively (N <= `sample_budget`) or on a uniform sample.
fn collect_scores(
    space: &SearchSpace,
    scorer: &Scorer,
    sample_budget: u64,
    seed: u64,
) -> Result<(Vec<f64>, bool)> {
    use rayon::prelude::*;
    let n = space.size()?;
    let subnets: Vec<Subnet> = if n <= sample_budget {
        space.enumerate(sample_budget)?.collect()
    } else {
        let mut rng = seed::rng(seed);
        (0..sample_budget).map(|_| space.random_subnet(&mut rng)).collect()
    };
    let scores = subnets
        .par_iter()
        .map(|s| scorer.score(space, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, n <= sample_budget))
}

pub fn build_partition(
    space: &SearchSpace,
    criterion: Criterion,
    k: usize,
    sample_budget: u64,
    seed: u64,
) -> Result<Partition> {
    let scorer = Scorer::new(space, criterion)?;
    build_partition_with(space, &scorer, k, sample_budget, seed)
}

pub fn build_partition_with(
    space: &SearchSpace,
    scorer: &Scorer,
    k: usize,
    sample_budget: u64,
    seed: u64,
) -> Result<Partition> {
    if k == 0 {
        return Err(Error::Usage("K must be at least 1".into()));
    }
    if sample_budget == 0 {
        return Err(Error::Usage("sample budget must be positive".into()));
    }
    let criterion = scorer.criterion;
    if k == 1 {
        return Partition::single(space, criterion);
    }
    let (scores, exact) = collect_scores(space, scorer, sample_budget, seed)?;
    let hist = histogram(&scores);
    if hist.len() < k {
        return Err(Error::Partition(format!(
            "criterion yields only {} distinct scores; choose K <= {}",
            hist.len(),
            hist.len()
        )));
    }
    let counts: Vec<u64> = hist.iter().map(|&(_, c)| c).collect();
    let ends = equal_mass_bins(&counts, k);
    let bin_edges = ends[..k - 1].iter().map(|&i| hist[i].0).collect();
    let mut subspace_sizes = Vec::with_capacity(k);
    let mut start = 0;
    for &e in &ends {
        subspace_sizes.push(counts[start..=e].iter().sum());
        start = e + 1;
    }
    Ok(Partition {
        space: space.name.clone(),
        space_size: space.size()?,
        criterion,
        k,
        bin_edges,
        subspace_sizes,
        exact,
        score_range: Some((hist[0].0, hist[hist.len() - 1].0)),
        seed,
    })
}

/// Criterion evaluator with a probe engine when needed and a score cache.
pub struct Scorer {
    criterion: Criterion,
    probe: Option<Arc<dyn ProbeEngine>>,
    cache: Mutex<HashMap<u64, f64>>,
}

impl Scorer {
    pub fn new(space: &SearchSpace, criterion: Criterion) -> Result<Self> {
        let probe: Option<Arc<dyn ProbeEngine>> = match (criterion.kind, criterion.probe) {
            (CriterionKind::LinearRegions, Some(spec)) => {
                Some(Arc::new(crate::supernet::LinearRegionProbe::new(space, spec)?))
            }
            (CriterionKind::LinearRegions, None) => {
                return Err(Error::Config("linear-regions criterion needs a probe spec".into()))
            }
            _ => None,
        };
        Ok(Self::with_probe(criterion, probe))
    }

    pub fn with_probe(criterion: Criterion, probe: Option<Arc<dyn ProbeEngine>>) -> Self {
        Scorer { criterion, probe, cache: Mutex::new(HashMap::new()) }
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn score(&self, space: &SearchSpace, subnet: &Subnet) -> Result<f64> {
        if !self.criterion.needs_forward_pass() {
            return score(&self.criterion, space, subnet, None);
        }
        let code = space.encode(subnet)?;
        if let Some(&s) = self.cache.lock().expect("cache lock").get(&code) {
            return Ok(s);
        }
        let s = score(&self.criterion, space, subnet, self.probe.as_deref())?;
        self.cache.lock().expect("cache lock").insert(code, s);
        Ok(s)
    }
}

/// Maps subnets to supernet indices for one (space, partition) pair.
pub struct Router {
    space: SearchSpace,
    partition: Partition,
    scorer: Scorer,
    hash: String,
}

impl Router {
    pub fn new(space: &SearchSpace, partition: Partition) -> Result<Self> {
        let scorer = Scorer::new(space, partition.criterion)?;
        Self::with_scorer(space, partition, scorer)
    }

    pub fn with_scorer(space: &SearchSpace, partition: Partition, scorer: Scorer) -> Result<Self> {
        partition.check_space(space)?;
        if scorer.criterion != partition.criterion {
            return Err(Error::Config("scorer criterion differs from the partition's".into()));
        }
        let hash = partition.hash();
        Ok(Router { space: space.clone(), partition, scorer, hash })
    }

    /// The one-shot router: every subnet maps to supernet 0.
    pub fn single(space: &SearchSpace) -> Result<Self> {
        Self::new(space, Partition::single(space, Criterion::nonlinear_count())?)
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn k(&self) -> usize {
        self.partition.k
    }

    pub fn partition_hash(&self) -> &str {
        &self.hash
    }

    pub fn route(&self, subnet: &Subnet) -> Result<usize> {
        if self.partition.k == 1 {
            self.space.check_subnet(subnet)?;
            return Ok(0);
        }
        Ok(self.partition.assign(self.scorer.score(&self.space, subnet)?))
    }
}

/// One histogram bin row: (supernet, metric, bin_lo, bin_hi, count).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistRow {
    pub supernet: usize,
    pub metric: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupernetSummary {
    pub supernet: usize,
    pub count: u64,
    pub flops_median: f64,
    pub params_median: f64,
    pub accuracy_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionStats {
    pub total: u64,
    pub exact: bool,
    pub rows: Vec<HistRow>,
    pub summaries: Vec<SupernetSummary>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Shared equal-width bins over the global range, counted per supernet.
fn histogram_rows(metric: &str, per_k: &[Vec<f64>], bins: usize) -> Vec<HistRow> {
    let all = per_k.iter().flatten();
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let nb = if hi > lo { bins } else { 1 };
    let mut rows = Vec::new();
    for (k, vals) in per_k.iter().enumerate() {
        let mut counts = vec![0u64; nb];
        for &v in vals {
            let b = (((v - lo) / width) as usize).min(nb - 1);
            counts[b] += 1;
        }
        for (b, &count) in counts.iter().enumerate() {
            rows.push(HistRow {
                supernet: k,
                metric: metric.to_string(),
                bin_lo: lo + b as f64 * width,
                bin_hi: if b + 1 == nb { hi.max(lo + width) } else { lo + (b + 1) as f64 * width },
                count,
            });
        }
    }
    rows
}

/// Per-supernet FLOPs/params histograms and, with an oracle, accuracy
/// distributions and medians. Enumerates the space when `N <= sample_budget`,
/// otherwise uses a uniform sample of `sample_budget` subnets.
pub fn partition_stats(
    router: &Router,
    oracle: Option<(&OracleTable, &str)>,
    sample_budget: u64,
    bins: usize,
    seed: u64,
) -> Result<PartitionStats> {
    let space = router.space();
    let n = space.size()?;
    let exact = n <= sample_budget;
    let subnets: Vec<Subnet> = if exact {
        space.enumerate(sample_budget)?.collect()
    } else {
        let mut rng = seed::rng(seed);
        (0..sample_budget).map(|_| space.random_subnet(&mut rng)).collect()
    };
    let k = router.k();
    let mut flops = vec![Vec::new(); k];
    let mut params = vec![Vec::new(); k];
    let mut acc = vec![Vec::new(); k];
    for s in &subnets {
        let b = router.route(s)?;
        flops[b].push(space.flops(s, 1)? as f64);
        params[b].push(space.param_count(s, 1)? as f64);
        if let Some((table, dataset)) = oracle {
            if let Some(row) = table.get(dataset, space.encode(s)?) {
                acc[b].push(row.accuracy);
            }
        }
    }
    let mut rows = histogram_rows("flops", &flops, bins);
    rows.extend(histogram_rows("params", &params, bins));
    if oracle.is_some() {
        rows.extend(histogram_rows("accuracy", &acc, bins));
    }
    let summaries = (0..k)
        .map(|b| SupernetSummary {
            supernet: b,
            count: flops[b].len() as u64,
            flops_median: median(&mut flops[b]).unwrap_or(f64::NAN),
            params_median: median(&mut params[b]).unwrap_or(f64::NAN),
            accuracy_median: median(&mut acc[b]),
        })
        .collect();
    Ok(PartitionStats { total: subnets.len() as u64, exact, rows, summaries })
}

impl PartitionStats {
    pub fn write_histograms(&self, path: &Path, header: &str) -> Result<()> {
        write_csv(path, header, &self.rows)
    }

    pub fn write_summaries(&self, path: &Path, header: &str) -> Result<()> {
        write_csv(path, header, &self.summaries)
    }

    /// Subnets counted per metric (equals `total` for each metric).
    pub fn mass(&self, metric: &str) -> u64 {
        self.rows.iter().filter(|r| r.metric == metric).map(|r| r.count).sum()
    }
}

/// CSV with a leading `# ...` provenance line.
pub(crate) fn write_csv<S: Serialize>(path: &Path, header: &str, rows: &[S]) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in header.lines() {
        writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
