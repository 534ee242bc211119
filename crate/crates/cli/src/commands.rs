use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fewshot_nas::evaloracle::{build_desk_oracle, rank_report, supernet_estimates, OracleTable, StandaloneProtocol};
use fewshot_nas::partition::{build_partition, partition_stats, Partition, Router};
use fewshot_nas::search::{
    evolutionary_search, exhaustive_search, Constraint, Fitness, FitnessKind, OracleFitness, SearchResult,
    SupernetFitness,
};
use fewshot_nas::seed;
use fewshot_nas::space::CostMetric;
use fewshot_nas::supernet::SupernetStore;
use fewshot_nas::training::{load_split, synthetic, train_until, Dataset, TrainMode};
use fewshot_nas::{Error, SearchSpace, Subnet};

use crate::config::RunConfig;
use crate::manifest;

pub const PARTITION: &str = "partition.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
const EXHAUSTIVE_LIMIT: u64 = 100_000;

pub fn parse_constraint(text: &str) -> anyhow::Result<Constraint> {
    let (metric, max) = text
        .split_once(':')
        .ok_or_else(|| Error::Usage(format!("constraint {text:?} must look like flops:N or params:N")))?;
    let metric = match metric {
        "flops" => CostMetric::Flops,
        "params" => CostMetric::Params,
        other => return Err(Error::Usage(format!("unknown constraint metric {other:?}")).into()),
    };
    let max = if max == "inf" {
        u64::MAX
    } else {
        max.parse().map_err(|_| Error::Usage(format!("bad constraint value {max:?}")))?
    };
    Ok(Constraint { metric, max })
}

fn header(command: &str, cfg: &RunConfig, space: &SearchSpace, partition_hash: Option<&str>) -> String {
    let mut h = format!("fsnas {command}\nspace: {}\nroot_seed: {}", space.name, cfg.seed);
    if let Some(p) = partition_hash {
        h.push_str(&format!("\npartition: {p}"));
    }
    h
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn load_partition(cfg: &RunConfig, space: &SearchSpace) -> anyhow::Result<Router> {
    let path = cfg.out.join(PARTITION);
    if !path.is_file() {
        return Err(Error::Usage(format!("{} not found; run `fsnas split` first", path.display())).into());
    }
    let p = Partition::load(&path)?;
    Ok(Router::new(space, p)?)
}

fn load_checkpoint(cfg: &RunConfig, space: &SearchSpace, router: &Router) -> anyhow::Result<SupernetStore<f32>> {
    let path = cfg.out.join(CHECKPOINT);
    if !path.is_file() {
        return Err(Error::Usage(format!("{} not found; run `fsnas train` first", path.display())).into());
    }
    let store = SupernetStore::load(&path, space)?;
    store.check_router(router).context("checkpoint does not match the partition")?;
    Ok(store)
}

/// (training set, test set) from the data directory or the synthetic generator.
fn datasets(cfg: &RunConfig, space: &SearchSpace) -> anyhow::Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data.dir {
        Some(dir) => load_split(dir)?,
        None => synthetic(&cfg.synthetic_spec(space))?,
    };
    train.check_space(space)?;
    test.check_space(space)?;
    Ok((train, test))
}

pub fn split(cfg: &RunConfig) -> anyhow::Result<()> {
    let space = cfg.space()?;
    let seed_p = cfg.stage_seed("partition");
    let partition = build_partition(&space, cfg.criterion()?, cfg.partition.k, cfg.partition.sample_budget, seed_p)?;
    let dir = out_dir(cfg)?;
    partition.save(&dir.join(PARTITION))?;
    let hash = partition.hash();
    let router = Router::new(&space, partition)?;
    let oracle = match &cfg.eval.oracle {
        Some(p) => Some(OracleTable::load(p)?),
        None => None,
    };
    let dataset = match &oracle {
        Some(t) => Some(t.pick_dataset(cfg.eval.dataset.as_deref())?.to_string()),
        None => None,
    };
    let stats = partition_stats(
        &router,
        oracle.as_ref().zip(dataset.as_deref()),
        cfg.partition.sample_budget,
        cfg.partition.histogram_bins,
        cfg.stage_seed("stats"),
    )?;
    let h = header("split", cfg, &space, Some(&hash));
    stats.write_histograms(&dir.join("partition_hist.csv"), &h)?;
    stats.write_summaries(&dir.join("partition_summary.csv"), &h)?;
    manifest::record(
        dir,
        "split",
        cfg.seed,
        &[("partition", seed_p)],
        &[PARTITION, "partition_hist.csv", "partition_summary.csv"],
    )?;
    let p = router.partition();
    println!("partition {hash}");
    println!("K = {}, subspace sizes {:?} (sum {}), exact = {}", p.k, p.subspace_sizes, p.subspace_sizes.iter().sum::<u64>(), p.exact);
    for s in &stats.summaries {
        match s.accuracy_median {
            Some(a) => println!("supernet {}: {} subnets, median FLOPs {:.0}, median accuracy {a:.2}", s.supernet, s.count, s.flops_median),
            None => println!("supernet {}: {} subnets, median FLOPs {:.0}", s.supernet, s.count, s.flops_median),
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: bool, stop_after: Option<u64>) -> anyhow::Result<()> {
    let space = cfg.space()?;
    let router = load_partition(cfg, &space)?;
    let tc = cfg.train_config()?;
    if tc.mode == TrainMode::UniformOneShot && router.k() != 1 {
        return Err(Error::Usage(format!("uniform one-shot training needs K = 1, partition has K = {}", router.k())).into());
    }
    let (train_full, _) = datasets(cfg, &space)?;
    let (train_set, _) = train_full.split_half();
    let dir = out_dir(cfg)?;
    let ckpt = dir.join(CHECKPOINT);
    let init_seed = cfg.stage_seed("init");
    let mut store = if resume && ckpt.is_file() {
        let s = load_checkpoint(cfg, &space, &router)?;
        if s.g() != cfg.supernet.g {
            return Err(Error::Usage(format!("checkpoint has G = {}, config asks for G = {}", s.g(), cfg.supernet.g)).into());
        }
        s
    } else {
        SupernetStore::init(&space, router.partition(), cfg.supernet.g, init_seed)?
    };
    let start_step = store.step;
    let log = train_until(&mut store, &router, &train_set, &tc, stop_after.unwrap_or(tc.epochs))?;
    store.save(&ckpt)?;
    let h = format!(
        "{}\ntrain_seed: {}\nmode: {:?}",
        header("train", cfg, &space, Some(router.partition_hash())),
        tc.seed,
        tc.mode
    );
    log.write_steps(&dir.join("train_steps.csv"), &h)?;
    log.write_epochs(&dir.join("train_epochs.csv"), &h)?;
    manifest::record(
        dir,
        "train",
        cfg.seed,
        &[("init", init_seed), ("train", tc.seed), ("data", cfg.stage_seed("data"))],
        &[CHECKPOINT, "train_steps.csv", "train_epochs.csv"],
    )?;
    println!(
        "trained epochs {}..{} (steps {}..{}), updates per supernet {:?}",
        log.epochs.first().map_or(store.epoch, |e| e.epoch),
        store.epoch,
        start_step,
        store.step,
        store.update_counts()
    );
    if let Some(l) = log.epoch_losses().last() {
        println!("final mean loss {l:.4}");
    }
    Ok(())
}

pub fn search(cfg: &RunConfig, exhaustive: bool, fitness_kind: &str) -> anyhow::Result<()> {
    let space = cfg.space()?;
    let router = load_partition(cfg, &space)?;
    let evo = cfg.evo_config();
    let store;
    let val;
    let oracle;
    let dataset;
    let fitness: Box<dyn Fitness + '_> = match fitness_kind {
        "supernet" | "supernet-loss" => {
            store = load_checkpoint(cfg, &space, &router)?;
            val = datasets(cfg, &space)?.0.split_half().1;
            let kind = if fitness_kind == "supernet" { FitnessKind::Accuracy } else { FitnessKind::NegLoss };
            Box::new(SupernetFitness::new(&store, &router, &val, cfg.eval.batch_size, kind)?)
        }
        "oracle" => {
            let path = cfg.eval.oracle.as_ref().ok_or_else(|| Error::Usage("--fitness oracle needs --oracle".into()))?;
            oracle = OracleTable::load(path)?;
            dataset = oracle.pick_dataset(cfg.eval.dataset.as_deref())?.to_string();
            Box::new(OracleFitness { space: &space, table: &oracle, dataset: &dataset })
        }
        other => return Err(Error::Usage(format!("unknown fitness {other:?}")).into()),
    };
    let dir = out_dir(cfg)?;
    let h = format!("{}\nsearch_seed: {}", header("search", cfg, &space, Some(router.partition_hash())), evo.seed);
    let mut files = vec!["search_result.json"];
    let best = if exhaustive {
        exhaustive_search(&space, fitness.as_ref(), evo.constraint, EXHAUSTIVE_LIMIT)?
    } else {
        let out = evolutionary_search(&space, fitness.as_ref(), &evo)?;
        out.write_history(&dir.join("search_history.csv"), &h)?;
        files.push("search_history.csv");
        println!("evaluated {} subnets", out.evaluations);
        out.best
    };
    let result = SearchResult::new(&space, &best, evo.constraint, router.partition_hash(), evo.seed);
    result.save(&dir.join("search_result.json"))?;
    manifest::record(dir, "search", cfg.seed, &[("search", evo.seed)], &files)?;
    println!(
        "best subnet {} {} fitness {:.4} cost {}",
        result.encoding,
        result.arch.as_deref().unwrap_or(&result.ops.join(",")),
        result.fitness,
        result.cost
    );
    Ok(())
}

/// All subnets when the space is small enough, otherwise a seeded sample of distinct ones.
fn subnets_to_estimate(space: &SearchSpace, max: u64, seed_: u64) -> anyhow::Result<Vec<Subnet>> {
    let n = space.size()?;
    if n <= max {
        return Ok(space.enumerate(max)?.collect());
    }
    let mut rng = seed::rng(seed_);
    let mut seen = BTreeSet::new();
    while (seen.len() as u64) < max {
        seen.insert(space.encode(&space.random_subnet(&mut rng))?);
    }
    Ok(seen.into_iter().map(|c| space.decode(c)).collect::<fewshot_nas::Result<_>>()?)
}

pub fn eval_rank(cfg: &RunConfig) -> anyhow::Result<()> {
    let space = cfg.space()?;
    let oracle_path =
        cfg.eval.oracle.as_ref().ok_or_else(|| Error::Usage("eval-rank needs an oracle table (--oracle)".into()))?;
    let oracle = OracleTable::load(oracle_path)?;
    oracle.check_space(&space)?;
    let dataset = oracle.pick_dataset(cfg.eval.dataset.as_deref())?.to_string();
    let router = load_partition(cfg, &space)?;
    let store = load_checkpoint(cfg, &space, &router)?;
    let val = datasets(cfg, &space)?.0.split_half().1;
    let eval_seed = cfg.stage_seed("eval");
    let mut subnets = subnets_to_estimate(&space, cfg.eval.max_subnets, eval_seed)?;
    let before = subnets.len();
    subnets.retain(|s| space.encode(s).map(|c| oracle.get(&dataset, c).is_some()).unwrap_or(false));
    if subnets.len() < before {
        log::warn!("{} of {before} subnets have no oracle row and were skipped", before - subnets.len());
    }
    let estimates = supernet_estimates(&store, &router, &subnets, &val, cfg.eval.batch_size)?;
    let report = rank_report(&estimates, &oracle, &dataset, cfg.eval.top_m)?;
    let dir = out_dir(cfg)?;
    let h = format!(
        "{}\noracle: {}\ndataset: {dataset}",
        header("eval-rank", cfg, &space, Some(router.partition_hash())),
        oracle.provenance
    );
    report.write_scatter(&dir.join("rank_scatter.csv"), &h)?;
    report.write_summary(&dir.join("rank_summary.csv"), &h)?;
    report.write_medians(&dir.join("rank_medians.csv"), &h)?;
    manifest::record(
        dir,
        "eval-rank",
        cfg.seed,
        &[("eval", eval_seed)],
        &["rank_scatter.csv", "rank_summary.csv", "rank_medians.csv"],
    )?;
    let top = report.tau_top_m.map_or("undefined".to_string(), |t| format!("{t:.4}"));
    println!("n = {}, tau_all = {:.4}, tau_top{} = {top}", report.n, report.tau_all, report.top_m);
    for m in &report.medians {
        println!(
            "supernet {}: {} subnets, median oracle accuracy {:.2}, median estimate {:.2}",
            m.supernet_k, m.count, m.oracle_median, m.estimated_median
        );
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct EnumRow {
    encoding: u64,
    arch: String,
    nonlinearities: u32,
    flops: u64,
    params: u64,
}

pub fn enumerate(space: &SearchSpace, limit: u64, output: Option<&Path>) -> anyhow::Result<()> {
    let sink: Box<dyn std::io::Write> = match output {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for s in space.enumerate(limit)? {
        let m = space.metrics(&s, 1)?;
        w.serialize(EnumRow {
            encoding: space.encode(&s)?,
            arch: space.arch_string(&s).unwrap_or_else(|_| space.op_names(&s).join("+")),
            nonlinearities: m.nonlinearity_count,
            flops: m.flops,
            params: m.params,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn desk_oracle(cfg: &RunConfig) -> anyhow::Result<()> {
    let space = cfg.space()?;
    let (train_set, test_set) = datasets(cfg, &space)?;
    let mut protocol = StandaloneProtocol::desk(cfg.oracle.seeds.iter().map(|&s| seed::derive_index(cfg.stage_seed("oracle"), s)).collect());
    protocol.train.epochs = cfg.oracle.epochs;
    protocol.eval_batch = cfg.eval.batch_size;
    let table = build_desk_oracle(&space, &train_set, &test_set, &protocol, &cfg.oracle.dataset)?;
    let dir = out_dir(cfg)?;
    let path: PathBuf = dir.join("oracle.csv");
    let h = format!("{}\noracle: {}", header("desk-oracle", cfg, &space, None), table.provenance);
    table.write_csv(&path, &h)?;
    manifest::record(dir, "desk-oracle", cfg.seed, &[("oracle", cfg.stage_seed("oracle"))], &["oracle.csv"])?;
    let (code, best) = table.best(&cfg.oracle.dataset).expect("nonempty table");
    println!("{} subnets, best {code} at {:.2}%", table.len(), best.accuracy);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_parsing() {
        assert_eq!(parse_constraint("flops:12").unwrap(), Constraint { metric: CostMetric::Flops, max: 12 });
        assert_eq!(parse_constraint("params:inf").unwrap().max, u64::MAX);
        assert!(parse_constraint("latency:3").is_err());
        assert!(parse_constraint("flops").is_err());
    }
}
