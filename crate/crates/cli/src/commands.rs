//! One function per subcommand. Human-readable progress goes to `out`; every
//! artifact is written under the configured paths.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssept::checkpoint;
use ssept::dataio::{
    build_sequences, corpus_stats, filter_min_counts, inference_window, load_interactions, read_cache,
    split_leave_last_two, write_cache, DatasetSplit, IdMaps, UserSequence,
};
use ssept::evaluation::{evaluate, EvalReport, EvalSplit, ModelScorer, PopRec, Scorer};
use ssept::model::{extract_attention_maps, infer, score_items, ModelConfig, ModelParams};
use ssept::training::{train, TrainOutcome};

use crate::config::RunConfig;
use crate::CliError;

/// Positions counted as recent by the recency-mass statistic.
pub const RECENT_POSITIONS: usize = 10;

/// RNG stream for user subsampling in `prepare`, distinct from the trainer's.
const SUBSAMPLE_STREAM: u64 = 6;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_corpus(cfg: &RunConfig) -> Result<(Vec<UserSequence>, IdMaps), CliError> {
    let file = File::open(&cfg.cache).map_err(|e| {
        CliError::Data(format!("cannot open cache {} ({e}); run `prepare` first", cfg.cache.display()))
    })?;
    Ok(read_cache(BufReader::new(file))?)
}

fn load_split(cfg: &RunConfig) -> Result<(DatasetSplit, IdMaps), CliError> {
    let (seqs, maps) = load_corpus(cfg)?;
    let split = split_leave_last_two(&seqs, maps.n_users(), maps.n_items());
    Ok((split, maps))
}

/// Loads the configured checkpoint and checks it against the dataset sizes.
fn load_model(cfg: &RunConfig, split: &DatasetSplit) -> Result<(ModelConfig, ModelParams), CliError> {
    let path = cfg.checkpoint_path();
    let file = File::open(&path)
        .map_err(|e| CliError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let (model_cfg, params) = checkpoint::load(BufReader::new(file))?;
    if model_cfg.n_users != split.n_users || model_cfg.n_items != split.n_items {
        return Err(CliError::Data(format!(
            "checkpoint was trained for {} users × {} items but the dataset has {} users × {} items",
            model_cfg.n_users, model_cfg.n_items, split.n_users, split.n_items
        )));
    }
    Ok((model_cfg, params))
}

fn lookup_user(maps: &IdMaps, raw: &str) -> Result<usize, CliError> {
    maps.user(raw)
        .ok_or_else(|| CliError::Data(format!("unknown user `{raw}`")))
}

/// Parses the interaction log, applies count filtering and user subsampling,
/// writes the sequence cache and reports corpus statistics. Empty input writes
/// no cache.
pub fn prepare(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    cfg.validate()?;
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| CliError::Config("`data.path` is required".into()))?;
    let file = File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let report = load_interactions(BufReader::new(file), &cfg.format())?;
    if report.malformed > 0 {
        writeln!(
            out,
            "skipped {} malformed lines (first at line {})",
            report.malformed,
            report.first_malformed_line.unwrap_or(0)
        )?;
    }
    let mut maps = IdMaps::new();
    let mut seqs = build_sequences(&report.records, &mut maps);
    if cfg.min_user_count > 1 || cfg.min_item_count > 1 {
        (seqs, maps) = filter_min_counts(&seqs, &maps, cfg.min_user_count, cfg.min_item_count);
    }
    if cfg.sample_users > 0 && cfg.sample_users < seqs.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SUBSAMPLE_STREAM);
        let mut keep = rand::seq::index::sample(&mut rng, seqs.len(), cfg.sample_users).into_vec();
        keep.sort_unstable();
        let subset: Vec<UserSequence> = keep.into_iter().map(|i| seqs[i].clone()).collect();
        (seqs, maps) = filter_min_counts(&subset, &maps, 1, 1);
    }

    let stats = corpus_stats(&seqs);
    writeln!(out, "users = {}", stats.users)?;
    writeln!(out, "items = {}", stats.items)?;
    writeln!(out, "interactions = {}", stats.interactions)?;
    writeln!(out, "avg_len = {:.1}", stats.avg_len)?;
    writeln!(out, "max_len = {}", stats.max_len)?;
    if seqs.is_empty() {
        writeln!(out, "no interactions; cache not written")?;
        return Ok(());
    }
    let split = split_leave_last_two(&seqs, maps.n_users(), maps.n_items());
    writeln!(out, "eval_users = {}", split.eval_users().count())?;
    let mut buf = Vec::new();
    write_cache(&mut buf, &seqs, &maps)?;
    write_file(&cfg.cache, &buf)?;
    writeln!(out, "cache = {}", cfg.cache.display())?;
    Ok(())
}

fn train_split(
    cfg: &RunConfig,
    split: &DatasetSplit,
    out: &mut dyn Write,
    log: &mut dyn Write,
) -> Result<(ModelConfig, TrainOutcome), CliError> {
    let model_cfg = cfg.model_config(split.n_users, split.n_items);
    let mut io_err = None;
    let outcome = train(split, &model_cfg, &cfg.train_config(), |entry| {
        let line = entry.to_line();
        let res = writeln!(log, "{line}").and_then(|_| writeln!(out, "{line}"));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Ok((model_cfg, outcome))
}

/// Trains on the cached corpus and writes the best-validation checkpoint,
/// the per-epoch metrics log, a summary and the effective configuration.
pub fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    cfg.validate()?;
    let (split, _) = load_split(cfg)?;
    create_dir(&cfg.output)?;
    write_file(&cfg.output.join("train.conf"), cfg.echo().as_bytes())?;
    let log_path = cfg.output.join("metrics.log");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let (model_cfg, outcome) = train_split(cfg, &split, out, &mut log)?;
    log.flush()?;
    write_file(&cfg.checkpoint_path(), &checkpoint::to_bytes(&model_cfg, &outcome.best))?;

    let mut summary = String::new();
    writeln!(summary, "epochs = {}", outcome.log.len()).unwrap();
    writeln!(summary, "best_epoch = {}", outcome.best_epoch).unwrap();
    writeln!(summary, "best_valid_ndcg_at_{} = {}", cfg.k, outcome.best_valid_ndcg).unwrap();
    if let Some(best) = outcome.log.iter().find(|e| e.epoch == outcome.best_epoch) {
        writeln!(summary, "best_valid_recall_at_{} = {}", cfg.k, best.valid_recall).unwrap();
    }
    writeln!(summary, "empty_batches = {}", outcome.empty_batches).unwrap();
    writeln!(summary, "checkpoint = {}", cfg.checkpoint_path().display()).unwrap();
    write_file(&cfg.output.join("train_summary.txt"), summary.as_bytes())?;
    out.write_all(summary.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    PopRec,
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "poprec" | "pop" => Ok(Baseline::PopRec),
            other => Err(format!("unknown baseline `{other}` (expected poprec)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: EvalSplit,
    /// One report per entry; empty means the configured `eval.negatives`.
    pub negatives: Vec<usize>,
    pub baseline: Option<Baseline>,
    pub per_user: bool,
}

/// Report file stem: `report_<split>_<scorer>_c<C>`.
pub fn report_stem(split: EvalSplit, scorer: &str, negatives: usize) -> String {
    format!("report_{}_{scorer}_c{negatives}", split.name())
}

/// Evaluates the checkpoint, or a baseline, once per requested candidate
/// count, writing one report (and optionally a per-user CSV) for each.
pub fn evaluate_cmd(cfg: &RunConfig, opts: &EvalOptions, out: &mut dyn Write) -> Result<Vec<EvalReport>, CliError> {
    cfg.validate()?;
    let negatives = if opts.negatives.is_empty() {
        vec![cfg.eval_negatives]
    } else {
        opts.negatives.clone()
    };
    for &c in &negatives {
        cfg.eval_config(c).validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let (split, _) = load_split(cfg)?;
    let pop;
    let model;
    let model_scorer;
    let (scorer, name): (&dyn Scorer, &str) = match opts.baseline {
        Some(Baseline::PopRec) => {
            pop = PopRec::fit(&split);
            (&pop, "poprec")
        }
        None => {
            model = load_model(cfg, &split)?.1;
            model_scorer = ModelScorer { params: &model };
            (&model_scorer, "model")
        }
    };
    create_dir(&cfg.output)?;
    write_file(&cfg.output.join("evaluate.conf"), cfg.echo().as_bytes())?;
    let mut reports = Vec::new();
    for c in negatives {
        let report = evaluate(scorer, &split, opts.split, &cfg.eval_config(c))?;
        let stem = report_stem(opts.split, name, c);
        let mut text = format!("scorer = {name}\n");
        text.push_str(&report.to_text());
        write_file(&cfg.output.join(format!("{stem}.txt")), text.as_bytes())?;
        if opts.per_user {
            write_file(&cfg.output.join(format!("{stem}.csv")), report.per_user_csv().as_bytes())?;
        }
        writeln!(
            out,
            "{name} {} C={c}: ndcg@{k} = {:.4} recall@{k} = {:.4} users = {} skipped = {}",
            opts.split.name(),
            report.ndcg_at_k,
            report.recall_at_k,
            report.users,
            report.skipped,
            k = cfg.k
        )?;
        reports.push(report);
    }
    Ok(reports)
}

/// Mean over blocks of the attention the final position pays to the last
/// [`RECENT_POSITIONS`] positions.
pub fn recency_mass(maps: &[ssept::model::AttentionMap]) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    let total: f64 = maps
        .iter()
        .map(|m| {
            let t = m.weights.rows();
            let last = m.weights.row(t - 1);
            last[t.saturating_sub(RECENT_POSITIONS)..].iter().sum::<f64>()
        })
        .sum();
    total / maps.len() as f64
}

/// Writes `block_<b>.csv` (one T×T lower-triangular matrix per block) and
/// `items.txt` (the model input, oldest first) for one user. Returns the
/// recency mass.
pub fn export_attention(cfg: &RunConfig, user_raw: &str, dir: &Path, out: &mut dyn Write) -> Result<f64, CliError> {
    cfg.validate()?;
    let (split, maps) = load_split(cfg)?;
    let user = lookup_user(&maps, user_raw)?;
    let (model_cfg, params) = load_model(cfg, &split)?;
    let window = inference_window(&split.users[user].full_sequence(), model_cfg.max_len);
    let attention = extract_attention_maps(&params, user, &window)?;
    create_dir(dir)?;
    for map in &attention {
        let w = &map.weights;
        let mut csv = String::new();
        for r in 0..w.rows() {
            let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:?}")).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_file(&dir.join(format!("block_{}.csv", map.block)), csv.as_bytes())?;
    }
    let mut items = String::new();
    for (pos, &i) in window.iter().enumerate() {
        let raw = maps.item_raw(i).unwrap_or("<pad>");
        writeln!(items, "{pos}\t{raw}").unwrap();
    }
    write_file(&dir.join("items.txt"), items.as_bytes())?;
    let mass = recency_mass(&attention);
    writeln!(
        out,
        "user {user_raw}: {} blocks, T = {}, recency mass (last {RECENT_POSITIONS} positions) = {mass:.4}",
        attention.len(),
        model_cfg.max_len
    )?;
    Ok(mass)
}

/// Top-`k` items for one user, scored against every item. History items are
/// excluded unless `include_history`. Ties go to the lower item index.
pub fn recommend(
    cfg: &RunConfig,
    user_raw: &str,
    k: usize,
    include_history: bool,
    out: &mut dyn Write,
) -> Result<Vec<(String, f64)>, CliError> {
    cfg.validate()?;
    if k == 0 {
        return Err(CliError::Config("k must be ≥ 1".into()));
    }
    let (split, maps) = load_split(cfg)?;
    let user = lookup_user(&maps, user_raw)?;
    let (model_cfg, params) = load_model(cfg, &split)?;
    let window = inference_window(&split.users[user].full_sequence(), model_cfg.max_len);
    let inf = infer(&params, user, &window)?;
    let items: Vec<usize> = (1..=split.n_items)
        .filter(|i| include_history || split.history(user).binary_search(i).is_err())
        .collect();
    let scores = score_items(inf.last_hidden(), &items, user, &params);
    let mut ranked: Vec<(usize, f64)> = items.into_iter().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: Vec<(String, f64)> = ranked
        .into_iter()
        .take(k)
        .map(|(i, s)| (maps.item_raw(i).unwrap_or("?").to_string(), s))
        .collect();
    for (rank, (item, s)) in top.iter().enumerate() {
        writeln!(out, "{}\t{item}\t{s:.6}", rank + 1)?;
    }
    Ok(top)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Blocks,
    Dims,
    SsePu,
    SamplingProb,
    Negatives,
}

impl std::str::FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "blocks" => Axis::Blocks,
            "dims" => Axis::Dims,
            "sse_pu" => Axis::SsePu,
            "sampling_prob" => Axis::SamplingProb,
            "negatives" => Axis::Negatives,
            other => {
                return Err(CliError::Config(format!(
                    "unknown ablation axis `{other}` (blocks, dims, sse_pu, sampling_prob, negatives)"
                )))
            }
        })
    }
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Blocks => "blocks",
            Axis::Dims => "dims",
            Axis::SsePu => "sse_pu",
            Axis::SamplingProb => "sampling_prob",
            Axis::Negatives => "negatives",
        }
    }

    /// Applies one axis value. `dims` takes `d_u:d_i`, or a single width used
    /// for both.
    fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<(), CliError> {
        match self {
            Axis::Blocks => cfg.set("model.blocks", value),
            Axis::Dims => {
                let (du, di) = value.split_once(':').unwrap_or((value, value));
                cfg.set("model.d_u", du)?;
                cfg.set("model.d_i", di)
            }
            Axis::SsePu => {
                cfg.sse_enabled = true;
                cfg.set("sse.p_u", value)
            }
            Axis::SamplingProb => cfg.set("train.sampling_prob", value),
            Axis::Negatives => cfg.set("eval.negatives", value),
        }
    }
}

/// Sweeps one axis. Every variant is validated before any training starts.
/// The `negatives` axis trains once and re-evaluates at each candidate count.
pub fn ablate(cfg: &RunConfig, axis: Axis, values: &[String], out: &mut dyn Write) -> Result<String, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("no ablation values given (`ablate.values`)".into()));
    }
    cfg.validate()?;
    let variants = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            axis.apply(&mut c, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let (split, _) = load_split(cfg)?;
    create_dir(&cfg.output)?;
    let mut echoed = cfg.clone();
    echoed.ablate_axis = Some(axis.name().to_string());
    echoed.ablate_values = values.to_vec();
    write_file(&cfg.output.join("ablate.conf"), echoed.echo().as_bytes())?;

    let k = cfg.k;
    let mut csv = String::new();
    let mut sink = std::io::sink();
    if axis == Axis::Negatives {
        writeln!(csv, "negatives,test_ndcg@{k},test_recall@{k}").unwrap();
        let (_, outcome) = train_split(cfg, &split, &mut sink, &mut std::io::sink())?;
        for (v, c) in values.iter().zip(&variants) {
            let r = evaluate(
                &ModelScorer { params: &outcome.best },
                &split,
                EvalSplit::Test,
                &c.eval_config(c.eval_negatives),
            )?;
            writeln!(csv, "{v},{},{}", r.ndcg_at_k, r.recall_at_k).unwrap();
            writeln!(out, "negatives={v}: ndcg@{k} = {:.4} recall@{k} = {:.4}", r.ndcg_at_k, r.recall_at_k)?;
        }
    } else {
        writeln!(csv, "{},valid_ndcg@{k},test_ndcg@{k},test_recall@{k},best_epoch", axis.name()).unwrap();
        for (v, c) in values.iter().zip(&variants) {
            let (_, outcome) = train_split(c, &split, &mut sink, &mut std::io::sink())?;
            let r = evaluate(
                &ModelScorer { params: &outcome.best },
                &split,
                EvalSplit::Test,
                &c.eval_config(c.eval_negatives),
            )?;
            writeln!(
                csv,
                "{v},{},{},{},{}",
                outcome.best_valid_ndcg, r.ndcg_at_k, r.recall_at_k, outcome.best_epoch
            )
            .unwrap();
            writeln!(
                out,
                "{}={v}: valid ndcg@{k} = {:.4} test ndcg@{k} = {:.4} recall@{k} = {:.4}",
                axis.name(),
                outcome.best_valid_ndcg,
                r.ndcg_at_k,
                r.recall_at_k
            )?;
        }
    }
    write_file(&cfg.output.join(format!("ablate_{}.csv", axis.name())), csv.as_bytes())?;
    Ok(csv)
}
