use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use uqforge_core::baselines::{
    self, BaselineOptions, Method, Orientation, ScoreVector, SCORE_CSV_HEADER,
};
use uqforge_core::binning::StreamBinning;
use uqforge_core::eval::{
    self, cross_cells, experiment_matrix, format_table, labels_of, DatasetTag, EvalReport,
    MatrixConfig, MatrixDataset, ReportOptions,
};
use uqforge_core::records::{parse_records, split_dataset, write_records, Dataset};
use uqforge_core::retrieval::{
    bm25_search, build_index, parse_corpus, recall_at_k, Bm25Params, GoldRef, MatchLevel,
    RetrievalResult,
};
use uqforge_core::scorer::{self, ScorerModel, TrainConfig};
use uqforge_core::synth::{generate, SyntheticWorldConfig};
use uqforge_core::Error;

use crate::{
    Cli, Command, EvalArgs, FitBinsArgs, MatrixArgs, OrientationArg, ReportArgs, RetrieveArgs,
    ScoreArgs, SynthArgs, TrainArgs, TrainOpts,
};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Retrieve(a) => retrieve(a),
        Command::FitBins(a) => fit_bins(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => evaluate(a),
        Command::Matrix(a) => matrix(a),
        Command::Report(a) => report(a),
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    parse_records(&read_text(path)?)
        .with_context(|| format!("loading records from {}", path.display()))
}

/// `out.json` + `csv` -> `out.csv`.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Records the resolved settings next to an output file.
fn echo_config(output: &Path, command: &str, settings: serde_json::Value) -> Result<()> {
    write_json(
        &sibling(output, "config.json"),
        &json!({ "command": command, "settings": settings }),
    )
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticWorldConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticWorldConfig::default(),
    };
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.regime {
        cfg.regime = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.correct_rate {
        cfg.correct_rate = v;
    }
    if let Some(v) = a.max_tokens {
        cfg.max_tokens = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let d = generate(&cfg)?;
    write_text(&a.output, &write_records(&d))?;
    echo_config(&a.output, "synth", serde_json::to_value(&cfg)?)?;
    log::info!("wrote {} records to {}", d.len(), a.output.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Query {
    id: String,
    query: String,
    #[serde(default)]
    gold: Option<GoldRef>,
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let corpus = build_index(
        parse_corpus(&read_text(&a.corpus)?)
            .with_context(|| format!("loading corpus {}", a.corpus.display()))?,
    )?;
    let queries: Vec<Query> = read_text(&a.input)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Parse {
                line: i + 1,
                source,
            })
        })
        .collect::<Result<_, _>>()
        .with_context(|| format!("loading queries from {}", a.input.display()))?;
    let params = Bm25Params { k1: a.k1, b: a.b };
    let results: Vec<RetrievalResult> = queries
        .par_iter()
        .map(|q| bm25_search(&corpus, &q.query, a.topk, params))
        .collect::<Result<_, _>>()?;

    let mut out = String::new();
    for (q, r) in queries.iter().zip(&results) {
        out.push_str(&json!({ "id": q.id, "hits": r.hits }).to_string());
        out.push('\n');
    }
    write_text(&a.output, &out)?;

    let level = if a.section_level {
        MatchLevel::Section
    } else {
        MatchLevel::Document
    };
    let (with_gold, gold): (Vec<RetrievalResult>, Vec<GoldRef>) = queries
        .iter()
        .zip(&results)
        .filter_map(|(q, r)| q.gold.clone().map(|g| (r.clone(), g)))
        .unzip();
    if !gold.is_empty() {
        let recall: Vec<serde_json::Value> = (1..=a.topk)
            .map(|k| {
                recall_at_k(&with_gold, &gold, k, level).map(|r| json!({ "k": k, "recall": r }))
            })
            .collect::<Result<_, _>>()?;
        for row in &recall {
            println!(
                "recall@{} = {:.4}",
                row["k"],
                row["recall"].as_f64().unwrap_or_default()
            );
        }
        write_json(
            &sibling(&a.output, "recall.json"),
            &json!({ "queries": gold.len(), "level": level, "recall": recall }),
        )?;
    }
    echo_config(
        &a.output,
        "retrieve",
        json!({ "topk": a.topk, "bm25": params, "level": level, "tokenizer": "lowercase alphanumeric runs, no stemming" }),
    )?;
    Ok(())
}

fn fit_bins(a: FitBinsArgs) -> Result<()> {
    let d = load_dataset(&a.input)?;
    let bins = StreamBinning::fit(&d, a.k, a.bin_mode, a.shared_bins)?;
    write_json(&a.output, &bins)?;
    echo_config(
        &a.output,
        "fit-bins",
        json!({ "k": a.k, "bin_mode": a.bin_mode, "shared_bins": a.shared_bins }),
    )?;
    Ok(())
}

fn resolve_train(o: &TrainOpts) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = o.k {
        cfg.k = v;
    }
    if let Some(v) = o.bin_mode {
        cfg.bin_mode = v;
    }
    if o.shared_bins {
        cfg.shared_bins = true;
    }
    if let Some(v) = o.max_len {
        cfg.model.max_len = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.optimizer {
        cfg.optimizer = v;
    }
    if let Some(v) = o.variant {
        cfg.model.variant = v;
    }
    if let Some(v) = o.embed_dim {
        cfg.model.embed_dim = v;
    }
    if let Some(v) = o.hidden_dim {
        cfg.model.hidden_dim = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train(&a.train)?;
    let mut data = load_dataset(&a.input)?;
    data.provenance.group_key = a.group_key.clone();
    let (train, val) = match &a.val {
        Some(p) => (data, load_dataset(p)?),
        None => split_dataset(&data, a.val_fraction, cfg.seed)?,
    };
    let model = match &a.bins {
        Some(p) => {
            let bins: StreamBinning = read_json(p)?;
            ScorerModel::with_bins(&train, bins, a.mask, cfg.model.clone(), cfg.seed)?
        }
        None => ScorerModel::build(&train, a.mask, &cfg)?,
    };
    let (mut model, log) = scorer::train(model, &train, &val, &cfg)?;
    if let Some(name) = &a.name {
        model.name = name.clone();
    }
    if !log.skipped_train.is_empty() || !log.skipped_val.is_empty() {
        log::warn!(
            "skipped {} training and {} validation records",
            log.skipped_train.len(),
            log.skipped_val.len()
        );
    }
    write_text(&a.output, &model.to_json())?;
    write_json(&sibling(&a.output, "log.json"), &log)?;
    echo_config(
        &a.output,
        "train",
        json!({
            "mask": a.mask,
            "name": model.name,
            "val_fraction": a.val.is_none().then_some(a.val_fraction),
            "group_key": a.group_key,
            "train": cfg,
            "train_records": train.len(),
            "val_records": val.len(),
        }),
    )?;
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    if a.models.is_empty() && a.methods.is_empty() {
        return Err(invalid("nothing to score: pass --model and/or --methods"));
    }
    let d = load_dataset(&a.input)?;
    let opts = BaselineOptions {
        pe_length_normalized: !a.pe_raw,
        imgper_orientation: match a.imgper_orientation {
            OrientationArg::Positive => Orientation::Positive,
            OrientationArg::Negative => Orientation::Negative,
        },
    };
    let mut vectors: Vec<ScoreVector> = Vec::new();
    for path in &a.models {
        let model = ScorerModel::from_json(&read_text(path)?)
            .with_context(|| format!("loading model {}", path.display()))?;
        vectors.push(scorer::score_dataset(&model, &d)?);
    }
    for name in &a.methods {
        let method: Method = name.parse()?;
        vectors.push(baselines::score_dataset(method, &d, &opts));
    }
    let mut out = SCORE_CSV_HEADER.to_string();
    for v in &vectors {
        if !v.skipped.is_empty() {
            log::warn!(
                "{}: {} of {} records skipped",
                v.method,
                v.skipped.len(),
                d.len()
            );
        }
        out.push_str(&v.to_csv());
    }
    write_text(&a.output, &out)?;
    echo_config(
        &a.output,
        "score",
        json!({
            "models": a.models,
            "methods": a.methods,
            "baseline_options": opts,
            "scored": vectors.iter().map(|v| json!({ "method": v.method, "scored": v.len(), "skipped": v.skipped.len() })).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

fn column_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let d = load_dataset(&a.input)?;
    let mut vectors: Vec<ScoreVector> = Vec::new();
    for path in &a.scores {
        let parsed = baselines::parse_score_csv(&read_text(path)?)
            .with_context(|| format!("loading scores {}", path.display()))?;
        vectors.extend(parsed);
    }
    if !a.methods.is_empty() {
        for m in &a.methods {
            if !vectors.iter().any(|v| &v.method == m) {
                let method: Method = m.parse().map_err(|_| {
                    invalid(format!(
                        "method {m} is neither in the score files nor a baseline"
                    ))
                })?;
                let v = baselines::score_dataset(method, &d, &BaselineOptions::default());
                if !v.skipped.is_empty() {
                    log::warn!("{m}: {} of {} records skipped", v.skipped.len(), d.len());
                }
                vectors.push(v);
            }
        }
        vectors.retain(|v| a.methods.contains(&v.method));
    }
    if vectors.is_empty() {
        return Err(invalid(
            "nothing to evaluate: pass --scores and/or --methods",
        ));
    }
    let opts = ReportOptions {
        reference: a.reference.clone(),
        secondary_reference: a.secondary_reference.clone(),
    };
    let r = eval::report(&vectors, &labels_of(&d), &opts)?;
    if !r.dropped.is_empty() {
        log::warn!(
            "{} labeled records were not scored by every method and were dropped",
            r.dropped.len()
        );
    }
    let table = format_table(&[(column_label(&a.input), r.clone())]);
    write_json(&a.output, &r)?;
    write_text(&sibling(&a.output, "csv"), &r.to_csv())?;
    write_text(&sibling(&a.output, "pairwise.csv"), &r.pairwise_csv())?;
    write_text(&sibling(&a.output, "txt"), &table)?;
    echo_config(
        &a.output,
        "eval",
        json!({ "scores": a.scores, "methods": a.methods, "report": opts }),
    )?;
    print!("{table}");
    Ok(())
}

fn parse_dataset_spec(spec: &str) -> Result<(DatasetTag, PathBuf, PathBuf)> {
    let bad = || invalid(format!("dataset spec {spec:?} is not NAME=TRAIN:TEST"));
    let (name, paths) = spec.split_once('=').ok_or_else(bad)?;
    let (train, test) = paths.split_once(':').ok_or_else(bad)?;
    let parts: Vec<&str> = name.split('/').collect();
    let tag = match parts.as_slice() {
        [dataset, retriever, model] => DatasetTag::new(dataset, retriever, model),
        _ => {
            return Err(invalid(format!(
                "dataset name {name:?} is not dataset/retriever/model"
            )))
        }
    };
    Ok((tag, PathBuf::from(train), PathBuf::from(test)))
}

fn matrix(a: MatrixArgs) -> Result<()> {
    let cfg = resolve_train(&a.train)?;
    let mut data = Vec::new();
    for spec in &a.datasets {
        let (tag, train, test) = parse_dataset_spec(spec)?;
        if data.iter().any(|d: &MatrixDataset| d.tag == tag) {
            return Err(invalid(format!("dataset {} listed twice", tag.label())));
        }
        let mut train = load_dataset(&train)?;
        train.provenance.group_key = a.group_key.clone();
        data.push(MatrixDataset {
            tag,
            train,
            test: load_dataset(&test)?,
        });
    }
    let tags: Vec<DatasetTag> = data.iter().map(|d| d.tag.clone()).collect();
    let mut mcfg = MatrixConfig::lemuq_vs_lars(cross_cells(&tags, a.skip_diagonal), cfg);
    mcfg.baselines = a
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_, _>>()?;
    mcfg.val_fraction = a.val_fraction;
    let reports = experiment_matrix(&data, &mcfg)?;

    let columns: Vec<(String, EvalReport)> = reports
        .iter()
        .map(|m| {
            let label = if m.cell.train == m.cell.eval {
                m.cell.eval.label()
            } else {
                format!("{}>{}", m.cell.train.label(), m.cell.eval.label())
            };
            (label, m.report.clone())
        })
        .collect();
    let table = format_table(&columns);
    write_json(&a.output, &reports)?;
    write_text(&sibling(&a.output, "txt"), &table)?;
    echo_config(&a.output, "matrix", serde_json::to_value(&mcfg)?)?;
    print!("{table}");
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut columns = Vec::new();
    for spec in &a.columns {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| invalid(format!("column spec {spec:?} is not LABEL=report.json")))?;
        let r: EvalReport = read_json(Path::new(path))?;
        columns.push((label.to_string(), r));
    }
    let table = format_table(&columns);
    if let Some(out) = &a.output {
        write_text(out, &table)?;
    }
    print!("{table}");
    Ok(())
}
