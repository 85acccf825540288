//! The eight experiment subcommands. Every run creates its output
//! directory, writes the exact resolved configuration beside its artifacts,
//! and emits metrics both to stdout and to `metrics.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};

use xattnlab_core::ckpt;
use xattnlab_core::lexicon::{induce_lexicon, lexicon_accuracy, EmbeddingMatrix, GoldDictionary};
use xattnlab_core::model::gradcheck_model;
use xattnlab_core::tasks::{
    gen_denoise, gen_parallel, gold_dictionary, read_corpus, write_corpus, Corpora, Inflection,
    LanguageSpec, ParallelCorpus, Reorder,
};
use xattnlab_core::tensor::op_checks;
use xattnlab_core::train::{evaluate_bleu, init_child, train, Child, FineTuneRegime};
use xattnlab_core::{GroupTag, Model, RegimeSetting, TransferSide};

use crate::config::ExperimentConfig;
use crate::metrics::{run_id, MetricsWriter};
use crate::CliError;

// ── run scaffolding ─────────────────────────────────────────────────

struct Run {
    out: PathBuf,
    cfg: ExperimentConfig,
    metrics: MetricsWriter,
}

/// Create the output directory, persist the resolved config, and derive
/// the run identity from the subcommand, its input paths, and that config.
fn start(
    name: &str,
    out: &Path,
    cfg: ExperimentConfig,
    inputs: &[(&str, &str)],
) -> Result<Run, CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    let resolved = cfg.render();
    fs::write(out.join("config.resolved"), &resolved)
        .map_err(|e| CliError::Usage(format!("cannot write resolved config: {e}")))?;

    let mut parts: Vec<String> = vec![name.to_string()];
    for (k, v) in inputs {
        parts.push(format!("{k}={v}"));
    }
    parts.push(resolved);
    let part_refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    let id = run_id(&part_refs);
    let metrics = MetricsWriter::create(out, id.clone())?;
    println!("# {name} run {id}");
    Ok(Run { out: out.to_path_buf(), cfg, metrics })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

// ── corpora on disk ─────────────────────────────────────────────────

const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn corpus_headers(cfg: &ExperimentConfig, split: &str, pairs: usize) -> Vec<(String, String)> {
    let mut h = vec![
        ("split".to_string(), split.to_string()),
        ("pairs".to_string(), pairs.to_string()),
    ];
    for key in [
        "data.kind",
        "data.concept_vocab",
        "src.surface_seed",
        "src.reorder",
        "src.inflection",
        "tgt.surface_seed",
        "tgt.reorder",
        "tgt.inflection",
    ] {
        if let Ok(task) = cfg.task() {
            let value = match key {
                "data.kind" => cfg.data_kind().unwrap_or("translation").to_string(),
                "data.concept_vocab" => task.src.concept_vocab.to_string(),
                "src.surface_seed" => task.src.surface_seed.to_string(),
                "src.reorder" => task.src.reorder.label(),
                "src.inflection" => Inflection::label(&task.src.inflection),
                "tgt.surface_seed" => task.tgt.surface_seed.to_string(),
                "tgt.reorder" => task.tgt.reorder.label(),
                "tgt.inflection" => Inflection::label(&task.tgt.inflection),
                _ => unreachable!(),
            };
            h.push((key.to_string(), value));
        }
    }
    h
}

fn load_split(dir: &Path, split: &str) -> Result<(ParallelCorpus, Vec<(String, String)>), CliError> {
    let path = dir.join(format!("{split}.tsv"));
    read_corpus(&path).map_err(CliError::Core)
}

/// Load train/dev/test from a gen-data directory. When the corpus headers
/// record a concept vocabulary, it must match `expect_vocab` (the model's
/// vocabulary minus specials).
fn load_corpora(dir: &Path, expect_vocab: Option<usize>) -> Result<Corpora, CliError> {
    let (train, headers) = load_split(dir, "train")?;
    let (dev, _) = load_split(dir, "dev")?;
    let (test, _) = load_split(dir, "test")?;
    if let (Some(expect), Some((_, v))) = (
        expect_vocab,
        headers.iter().find(|(k, _)| k == "data.concept_vocab"),
    ) {
        let recorded: usize = v.parse().map_err(|_| {
            CliError::Core(xattnlab_core::Error::Contract(format!(
                "corpus header data.concept_vocab={v:?} does not parse"
            )))
        })?;
        if recorded != expect {
            return Err(CliError::Core(xattnlab_core::Error::Contract(format!(
                "corpus was generated over {recorded} concepts but this \
                 configuration expects {expect}"
            ))));
        }
    }
    Ok(Corpora { train, dev, test })
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn gen_data(cfg: ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let mut run = start("gen-data", out, cfg, &[])?;
    let corpus_cfg = run.cfg.corpus_config()?;
    let seed = run.cfg.data_seed()?;
    let corpora = match run.cfg.data_kind()? {
        "translation" => gen_parallel(&run.cfg.task()?, &corpus_cfg, seed)?,
        _ => gen_denoise(
            &run.cfg.task()?.src,
            &corpus_cfg,
            &run.cfg.noise_config()?,
            seed,
        )?,
    };
    for (split, corpus) in SPLITS.iter().zip([&corpora.train, &corpora.dev, &corpora.test]) {
        let headers = corpus_headers(&run.cfg, split, corpus.len());
        write_corpus(&run.out.join(format!("{split}.tsv")), corpus, &headers)?;
        run.metrics.emit(None, &format!("pairs.{split}"), corpus.len() as f64)?;
    }
    Ok(())
}

// ── training commands ───────────────────────────────────────────────

fn emit_training(
    metrics: &mut MetricsWriter,
    outcome: &xattnlab_core::train::TrainOutcome,
) -> Result<(), CliError> {
    for m in &outcome.metrics {
        metrics.emit(Some(m.step), &m.metric, m.value)?;
    }
    if let Some(bleu) = outcome.best_dev_bleu {
        metrics.emit(None, "best_dev_bleu", bleu)?;
    }
    Ok(())
}

pub fn train_parent(cfg: ExperimentConfig, out: &Path, data: &Path) -> Result<(), CliError> {
    let run_cfg = cfg.clone();
    let mut run = start("train-parent", out, cfg, &[("data", &path_str(data))])?;
    let model_cfg = run_cfg.model_config()?;
    let corpora = load_corpora(data, Some(model_cfg.src_vocab_size - xattnlab_core::tasks::NUM_SPECIALS))?;
    let model = Model::build(model_cfg, run_cfg.seed()?)?;
    let outcome = train(model, &GroupTag::ALL, &corpora, &run_cfg.train_config()?)?;
    emit_training(&mut run.metrics, &outcome)?;

    let test_bleu = evaluate_bleu(&outcome.model, &corpora.test)?;
    run.metrics.emit(None, "test_bleu", test_bleu)?;

    let ckpt_path = run.out.join("parent.xattn");
    ckpt::save_full(&ckpt_path, &outcome.model)?;
    println!("# wrote {}", ckpt_path.display());
    Ok(())
}

pub fn finetune(
    cfg: ExperimentConfig,
    out: &Path,
    data: &Path,
    parent_path: &Path,
) -> Result<(), CliError> {
    let run_cfg = cfg.clone();
    let mut run = start(
        "finetune",
        out,
        cfg,
        &[("data", &path_str(data)), ("parent", &path_str(parent_path))],
    )?;
    let parent = ckpt::load_full(parent_path)?;
    let corpora = load_corpora(
        data,
        Some(parent.config.src_vocab_size - xattnlab_core::tasks::NUM_SPECIALS),
    )?;
    let side = run_cfg.side()?;
    let settings: Vec<RegimeSetting> = match run_cfg.regime_selection()? {
        Some(regime) => vec![regime.setting],
        None => RegimeSetting::ALL.to_vec(),
    };
    let seed = run_cfg.seed()?;
    let train_cfg = run_cfg.train_config()?;
    let base_id = run.metrics.run_id().to_string();

    let mut summary = String::from("regime\tside\tfraction\tbest_dev_bleu\ttest_bleu\tartifact\n");
    for setting in settings {
        let regime = FineTuneRegime::new(setting, side);
        run.metrics.set_run_id(run_id(&[&base_id, &regime.label()]));

        let tags = regime.trainable_tags();
        let fraction = ckpt::storage_report(&parent.config, &tags)?.fraction;
        let (outcome, artifact) = if setting == RegimeSetting::Scratch {
            let model = Model::build(parent.config.clone(), seed)?;
            let outcome = train(model, &tags, &corpora, &train_cfg)?;
            let name = format!("scratch_{}.xattn", side.label().to_lowercase());
            ckpt::save_full(&run.out.join(&name), &outcome.model)?;
            (outcome, name)
        } else {
            let child = init_child(&parent, parent.config.clone(), regime, seed)?;
            let parent_lineage = child.parent_lineage;
            let outcome = train(child.model, &tags, &corpora, &train_cfg)?;
            let name = format!(
                "delta_{}_{}.xattd",
                setting.label().to_lowercase(),
                side.label().to_lowercase()
            );
            let trained = Child { model: outcome.model.clone(), regime, parent_lineage };
            ckpt::save_delta(&run.out.join(&name), &trained)?;
            (outcome, name)
        };
        emit_training(&mut run.metrics, &outcome)?;
        let test_bleu = evaluate_bleu(&outcome.model, &corpora.test)?;
        run.metrics.emit(None, "test_bleu", test_bleu)?;
        run.metrics.emit(None, "fraction_updated", fraction)?;

        let best = outcome
            .best_dev_bleu
            .map(|b| b.to_string())
            .unwrap_or_else(|| "-".into());
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            setting.label(),
            side.label(),
            fraction,
            best,
            test_bleu,
            artifact
        ));
        println!("# {} done: test BLEU {test_bleu}", regime.label());
    }
    fs::write(run.out.join("summary.tsv"), &summary)
        .map_err(|e| CliError::Usage(format!("cannot write summary: {e}")))?;
    print!("{summary}");
    Ok(())
}

// ── compose ─────────────────────────────────────────────────────────

pub enum ComposeArgs {
    Restore { delta: PathBuf, parent: PathBuf },
    ZeroShot {
        source_delta: PathBuf,
        target_delta: PathBuf,
        parent: PathBuf,
        allow_mismatch: bool,
    },
}

pub fn compose(cfg: ExperimentConfig, out: &Path, args: ComposeArgs) -> Result<(), CliError> {
    let (inputs, mode): (Vec<(&str, String)>, &str) = match &args {
        ComposeArgs::Restore { delta, parent } => (
            vec![("delta", path_str(delta)), ("parent", path_str(parent))],
            "restore",
        ),
        ComposeArgs::ZeroShot { source_delta, target_delta, parent, allow_mismatch } => (
            vec![
                ("source_delta", path_str(source_delta)),
                ("target_delta", path_str(target_delta)),
                ("parent", path_str(parent)),
                ("allow_mismatch", allow_mismatch.to_string()),
            ],
            "zero-shot",
        ),
    };
    let input_refs: Vec<(&str, &str)> = inputs.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let mut run = start("compose", out, cfg, &input_refs)?;

    let (model, name) = match args {
        ComposeArgs::Restore { delta, parent } => {
            let parent = ckpt::load_full(&parent)?;
            let child = ckpt::load_delta(&delta, &parent)?;
            (ckpt::restore_parent_embeddings(&child, &parent)?, "restored.xattn")
        }
        ComposeArgs::ZeroShot { source_delta, target_delta, parent, allow_mismatch } => {
            let parent = ckpt::load_full(&parent)?;
            let source_child = ckpt::load_delta(&source_delta, &parent)?;
            let target_child = ckpt::load_delta(&target_delta, &parent)?;
            (
                ckpt::compose_zero_shot(&source_child, &target_child, allow_mismatch)?,
                "composed.xattn",
            )
        }
    };
    run.metrics.emit(None, "composed_params", model.param_count() as f64)?;
    let path = run.out.join(name);
    ckpt::save_full(&path, &model)?;
    println!("# {mode} wrote {}", path.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

pub struct EvalArgs {
    pub data: PathBuf,
    pub split: String,
    pub model: Option<PathBuf>,
    pub delta: Option<PathBuf>,
    pub parent: Option<PathBuf>,
}

pub fn eval(cfg: ExperimentConfig, out: &Path, args: EvalArgs) -> Result<(), CliError> {
    if !SPLITS.contains(&args.split.as_str()) {
        return Err(CliError::Usage(format!(
            "--split must be one of train/dev/test, got {:?}",
            args.split
        )));
    }
    let mut inputs = vec![("data", path_str(&args.data)), ("split", args.split.clone())];
    for (k, v) in [("model", &args.model), ("delta", &args.delta), ("parent", &args.parent)] {
        if let Some(p) = v {
            inputs.push((k, path_str(p)));
        }
    }
    let input_refs: Vec<(&str, &str)> = inputs.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let mut run = start("eval", out, cfg, &input_refs)?;

    let model = match (&args.model, &args.delta, &args.parent) {
        (Some(m), None, None) => ckpt::load_full(m)?,
        (None, Some(d), Some(p)) => ckpt::load_delta(d, &ckpt::load_full(p)?)?.model,
        _ => {
            return Err(CliError::Usage(
                "pass either --model, or --delta together with --parent".into(),
            ))
        }
    };
    let (corpus, _) = load_split(&args.data, &args.split)?;
    let bleu = evaluate_bleu(&model, &corpus)?;
    run.metrics.emit(None, "eval_bleu", bleu)?;
    run.metrics.emit(None, "sentences", corpus.len() as f64)?;
    Ok(())
}

// ── lexicon ─────────────────────────────────────────────────────────

fn load_full_or_delta(path: &Path, parent: &Model) -> Result<Model, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Core(xattnlab_core::Error::io(path, e)))?;
    match bytes.get(0..4) {
        Some(b"XATD") => Ok(ckpt::load_delta(path, parent)?.model),
        _ => Ok(ckpt::load_full(path)?),
    }
}

pub fn lexicon(
    cfg: ExperimentConfig,
    out: &Path,
    child_path: &Path,
    parent_path: &Path,
) -> Result<(), CliError> {
    let run_cfg = cfg.clone();
    let mut run = start(
        "lexicon",
        out,
        cfg,
        &[("child", &path_str(child_path)), ("parent", &path_str(parent_path))],
    )?;
    let parent = ckpt::load_full(parent_path)?;
    let child = load_full_or_delta(child_path, &parent)?;

    let tag = match run_cfg.side()? {
        TransferSide::NewSource => GroupTag::Src,
        TransferSide::NewTarget => GroupTag::Tgt,
    };
    let child_emb = EmbeddingMatrix::from_model(&child, tag)?;
    let parent_emb = EmbeddingMatrix::from_model(&parent, tag)?;

    let (child_surface, parent_surface) = run_cfg.lexicon_surfaces()?;
    let concept_vocab = child_emb.vocab() - xattnlab_core::tasks::NUM_SPECIALS;
    let lang = |surface_seed| LanguageSpec {
        concept_vocab,
        surface_seed,
        reorder: Reorder::Identity, // gold pairs depend on surface maps only
        inflection: None,           // dictionaries list base forms
    };
    let gold = GoldDictionary::new(gold_dictionary(&lang(child_surface), &lang(parent_surface))?);

    let induced = induce_lexicon(&child_emb, &parent_emb, &child_emb.surface_types())?;
    let score = lexicon_accuracy(&induced, &gold)?;
    run.metrics.emit(None, "lexicon_accuracy", score.accuracy)?;
    run.metrics.emit(None, "lexicon_evaluated", score.evaluated as f64)?;
    run.metrics.emit(None, "lexicon_skipped_zero", induced.skipped_zero.len() as f64)?;
    Ok(())
}

// ── params ──────────────────────────────────────────────────────────

pub fn params(cfg: ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let run_cfg = cfg.clone();
    let mut run = start("params", out, cfg, &[])?;
    let model_cfg = run_cfg.model_config()?;
    let side = run_cfg.side()?;
    let total = Model::count_by_group(&model_cfg).values().sum::<usize>();
    run.metrics.emit(None, "total_params", total as f64)?;
    println!("# regime\tstored_params\tfraction");
    for setting in RegimeSetting::ALL {
        let tags = FineTuneRegime::new(setting, side).trainable_tags();
        let report = ckpt::storage_report(&model_cfg, &tags)?;
        run.metrics.emit(
            None,
            &format!("fraction.{}", setting.label()),
            report.fraction,
        )?;
        println!("# {}\t{}\t{}", setting.label(), report.stored_params, report.fraction);
    }
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

pub fn gradcheck(
    cfg: ExperimentConfig,
    out: &Path,
    perturb: Option<f64>,
) -> Result<(), CliError> {
    let run_cfg = cfg.clone();
    let perturb_str = perturb.map(|p| p.to_string()).unwrap_or_else(|| "none".into());
    let mut run = start("gradcheck", out, cfg, &[("perturb", &perturb_str)])?;
    let seed = run_cfg.seed()?;

    let mut failures = Vec::new();
    for check in op_checks(seed, perturb)? {
        run.metrics.emit(
            None,
            &format!("gradcheck.op.{}", check.name),
            check.report.max_rel_err,
        )?;
        if !check.report.pass {
            failures.push(format!("op {} (max_rel_err {})", check.name, check.report.max_rel_err));
        }
    }

    let report = gradcheck_model(&run_cfg.model_config()?, seed, 128, perturb)?;
    run.metrics.emit(None, "gradcheck.model", report.max_rel_err)?;
    run.metrics.emit(None, "gradcheck.model.checked", report.checked as f64)?;
    if !report.pass {
        failures.push(format!(
            "model loss (max_rel_err {} at coordinate {})",
            report.max_rel_err, report.worst_coord
        ));
    }

    if failures.is_empty() {
        println!("# gradcheck clean");
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed: {}",
            failures.join("; ")
        )))
    }
}
