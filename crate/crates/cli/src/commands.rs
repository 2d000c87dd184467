use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mcnn_core::corpus::{Corpus, LabelMap, Raster, Split};
use mcnn_core::eval::{evaluate_all, report};
use mcnn_core::experiment::{ablation_table, run_ablation, select_variants, standard_variants};
use mcnn_core::model::{check_gradients, McnnConfig};
use mcnn_core::pipeline::{parse as run_parse, NetworkMatcher, ParseContext, ParseOptions};
use mcnn_core::synth::gen_corpus;
use mcnn_core::train::{
    evaluate_pairs, load_checkpoint, log_to_csv, prepare, train as run_train, PairTensors, TrainOptions,
};
use serde_json::json;

use crate::config::{load_synth_spec, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.mcnn";
pub const LOG_FILE: &str = "train_log.csv";
pub const INDEX_FILE: &str = "index.knnx";

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(mcnn_core::Error::from)?;
    fs::write(path, text)?;
    Ok(())
}

fn corpus_dir<'a>(cfg: &'a RunConfig, flag: Option<&'a Path>) -> Result<&'a Path, CliError> {
    flag.or(cfg.corpus.path.as_deref())
        .ok_or_else(|| CliError::Usage("no corpus given (--corpus or corpus.path)".into()))
}

/// Zero-padded entry id, the stem used for corpus files and parse outputs.
pub fn stem(id: u32) -> String {
    format!("{id:05}")
}

pub fn gen_data(cfg: &RunConfig, spec: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let spec = match spec {
        Some(p) => load_synth_spec(p)?,
        None => cfg.synth.clone(),
    };
    let corpus = gen_corpus(&spec, out)?;
    let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| corpus.split(s).len()).collect();
    println!("corpus: {} entries, {}x{}, L = {}", corpus.entries.len(), corpus.height, corpus.width, corpus.num_labels());
    println!("train {}  val {}  test {}", counts[0], counts[1], counts[2]);
    let freqs = corpus.label_frequencies();
    for (name, f) in corpus.label_names.iter().zip(&freqs) {
        println!("  {name:<14} {:>6.1}%", 100.0 * f);
    }
    write_json(
        &out.join("summary.json"),
        &json!({
            "entries": corpus.entries.len(),
            "splits": { "train": counts[0], "val": counts[1], "test": counts[2] },
            "label_names": corpus.label_names,
            "label_frequencies": freqs,
            "seed": spec.seed,
        }),
    )
}

pub fn train(cfg: &RunConfig, corpus: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let corpus = Corpus::load(corpus_dir(cfg, corpus)?)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let model = resume.as_ref().map(|ck| ck.config().clone()).unwrap_or_else(|| cfg.model.clone());
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let data = prepare(&corpus, &cfg.train)?;
    data.index.save(&out.join(INDEX_FILE))?;
    println!(
        "{} training pairs, {} validation pairs, {} parameters",
        data.train_pairs.len(),
        data.val_pairs.as_ref().map_or(0, |v| v.len()),
        mcnn_core::model::McnnParams::<f32>::zeros(&model)?.num_parameters()
    );
    let log_path = out.join(LOG_FILE);
    let append = resume.is_some() && log_path.exists();
    let options = TrainOptions { diagnostic_path: Some(out.join("diverged.mcnn")) };
    let outcome = run_train(&data, &cfg.train, &model, resume, &options, |r| {
        println!("epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}", r.epoch, r.train_loss, r.val_loss, r.lr)
    })?;
    let ck = &outcome.checkpoint;
    ck.save(&out.join(CHECKPOINT_FILE))?;
    let csv = log_to_csv(&outcome.log);
    if append {
        let mut f = fs::OpenOptions::new().append(true).open(&log_path)?;
        f.write_all(csv.split_once('\n').map_or("", |(_, rows)| rows).as_bytes())?;
    } else {
        fs::write(&log_path, csv)?;
    }
    let (h, w) = (model.input_height, model.input_width);
    let tt = PairTensors::new(&data.train_pairs, &ck.normalizer, h, w);
    let train_m = evaluate_pairs(&ck.params, &ck.normalizer, &data.train_pairs, &tt)?;
    let val_m = match &data.val_pairs {
        Some(v) => Some(evaluate_pairs(&ck.params, &ck.normalizer, v, &PairTensors::new(v, &ck.normalizer, h, w))?),
        None => None,
    };
    println!(
        "train pairs: confidence accuracy {:.4}, displacement MAE {:.4}",
        train_m.confidence_accuracy, train_m.displacement_mae
    );
    write_json(
        &out.join("train_summary.json"),
        &json!({ "epochs": ck.state.epoch, "log": outcome.log, "train_pairs": train_m, "val_pairs": val_m }),
    )
}

pub fn parse(
    cfg: &RunConfig,
    corpus: Option<&Path>,
    checkpoint: &Path,
    image: Option<&Path>,
    split: Option<Split>,
    k: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let corpus = Corpus::load(corpus_dir(cfg, corpus)?)?;
    let opts = ParseOptions { k: k.unwrap_or(cfg.parse.k), ..cfg.parse.clone() };
    let ctx = ParseContext::from_corpus(&corpus, ck.extractor, Some(&ck.params))?;
    let matcher = NetworkMatcher { params: &ck.params, normalizer: ck.normalizer };
    let queries: Vec<(String, Raster, Option<u32>)> = match image {
        Some(path) => {
            let name = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            vec![(name, Raster::load(path)?, None)]
        }
        None => {
            let split = split.unwrap_or(cfg.corpus.split);
            corpus
                .split(split)
                .into_iter()
                .map(|e| (stem(e.id), e.image.clone(), (e.split == Split::Train).then_some(e.id)))
                .collect()
        }
    };
    if queries.is_empty() {
        return Err(CliError::Usage("nothing to parse".into()));
    }
    let mut summary = Vec::with_capacity(queries.len());
    for (name, img, exclude) in &queries {
        let (result, _) = run_parse(img, &ctx, &matcher, &opts, *exclude, Some(&ck.params))?;
        result.save(out, name, img, &corpus.label_names)?;
        let visible: Vec<&str> = result
            .labels
            .iter()
            .zip(&corpus.label_names)
            .filter(|(v, _)| v.visible)
            .map(|(_, n)| n.as_str())
            .collect();
        println!("{name}: {}", visible.join(", "));
        summary.push(json!({ "name": name, "neighbors": result.neighbors, "visible": visible }));
    }
    write_json(&out.join("parse_summary.json"), &json!({ "k": opts.k, "results": summary }))
}

pub fn eval(
    cfg: &RunConfig,
    pred_dir: &Path,
    truth: &Path,
    split: Option<Split>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let corpus = Corpus::load(truth)?;
    let split = split.unwrap_or(cfg.corpus.split);
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for e in corpus.split(split) {
        let path: PathBuf = pred_dir.join(format!("{}_labels.png", stem(e.id)));
        if path.exists() {
            preds.push(LabelMap::load(&path)?);
            truths.push(&e.label_map);
        }
    }
    if preds.is_empty() {
        return Err(mcnn_core::Error::Eval(format!("no predictions for split {split:?} in {}", pred_dir.display())).into());
    }
    let pairs: Vec<(&LabelMap, &LabelMap)> = preds.iter().zip(truths).collect();
    let metrics = report(&evaluate_all(&pairs, corpus.num_labels())?, &corpus.label_names)?;
    print!("{}", metrics.to_table());
    let dir = out.unwrap_or(pred_dir);
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), metrics.to_json()?)?;
    Ok(())
}

pub fn gradcheck(count: usize, eps: f64, tolerance: f64, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let config = McnnConfig::reduced();
    let r = check_gradients(&config, 3, count, eps, seed)?;
    println!("max relative error: {:.3e} (checked {}, skipped {})", r.max_rel_error, r.checked, r.skipped);
    if let Some(path) = out {
        write_json(
            path,
            &json!({
                "max_rel_error": r.max_rel_error,
                "checked": r.checked,
                "skipped": r.skipped,
                "eps": eps,
                "tolerance": tolerance,
                "passed": r.max_rel_error < tolerance,
            }),
        )?;
    }
    if r.max_rel_error < tolerance {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {:.3e} >= {tolerance:.1e}", r.max_rel_error)))
    }
}

pub fn ablate(cfg: &RunConfig, corpus: Option<&Path>, variants: Option<&str>, out: &Path) -> Result<(), CliError> {
    let corpus = Corpus::load(corpus_dir(cfg, corpus)?)?;
    let all = standard_variants(&cfg.model);
    let chosen = match variants {
        Some(list) => {
            let names: Vec<String> = list.split(';').filter(|s| !s.trim().is_empty()).map(str::to_owned).collect();
            select_variants(&all, &names)?
        }
        None => all,
    };
    let rows = run_ablation(&corpus, &chosen, &cfg.train, &cfg.parse, cfg.corpus.split, |m| eprintln!("{m}"))?;
    let table = ablation_table(&rows);
    print!("{table}");
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.txt"), &table)?;
    write_json(&out.join("ablation.json"), &serde_json::to_value(&rows).map_err(mcnn_core::Error::from)?)
}
