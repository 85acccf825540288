//! The acceptance gate: ten end-to-end checks, one per headline claim of the
//! lab. Each test prints a single `ACCEPTANCE <n> <name>: PASS|FAIL` line.
//!
//! Everything expensive (two pretrained parents, the 5-regime × 3-seed
//! transfer sweep, target-side children, compositions, the freeze audit) is
//! built once in a shared fixture; the tests themselves only read it.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use xattnlab_core::ckpt;
use xattnlab_core::lexicon::{induce_lexicon, lexicon_accuracy, EmbeddingMatrix, GoldDictionary};
use xattnlab_core::model::gradcheck_model;
use xattnlab_core::tasks::bleu::corpus_bleu;
use xattnlab_core::tasks::{
    gen_denoise, gen_parallel, gold_dictionary, CorpusConfig, Corpora, LanguageSpec, NoiseConfig,
    ParallelCorpus, Reorder, TaskSpec, NUM_SPECIALS,
};
use xattnlab_core::tensor::op_checks;
use xattnlab_core::train::{evaluate_bleu, init_child, train, Child, TrainConfig};
use xattnlab_core::{FineTuneRegime, GroupTag, Model, ModelConfig, RegimeSetting, TransferSide};

// ── experiment constants (calibrated once, then frozen) ────────────

const CONCEPTS: usize = 300;
const VOCAB: usize = CONCEPTS + NUM_SPECIALS;
const PARENT_STEPS: usize = 3000;
const CHILD_STEPS: usize = 600;
/// Step count pinned by the freeze-hardness criterion.
const FREEZE_STEPS: usize = 300;
const SEEDS: [u64; 3] = [1, 2, 3];

/// Four synthetic languages over one concept inventory. The word-order
/// structure lives on the A/C side, so parent A→B, children C→B and A→D,
/// and the composed C→D all share one reversal-plus-relexicalization task
/// while differing in lexicon — the transfer setting under study.
fn lang_a() -> LanguageSpec {
    LanguageSpec { concept_vocab: CONCEPTS, surface_seed: 1, reorder: Reorder::Reverse, inflection: None }
}
fn lang_b() -> LanguageSpec {
    LanguageSpec { concept_vocab: CONCEPTS, surface_seed: 2, reorder: Reorder::Identity, inflection: None }
}
fn lang_c() -> LanguageSpec {
    LanguageSpec { concept_vocab: CONCEPTS, surface_seed: 5, reorder: Reorder::Reverse, inflection: None }
}
fn lang_d() -> LanguageSpec {
    LanguageSpec { concept_vocab: CONCEPTS, surface_seed: 9, reorder: Reorder::Identity, inflection: None }
}

fn desk_model_config() -> ModelConfig {
    ModelConfig {
        src_vocab_size: VOCAB,
        tgt_vocab_size: VOCAB,
        ..ModelConfig::default()
    }
}

fn corpus_config() -> CorpusConfig {
    CorpusConfig {
        train_pairs: 8000,
        dev_pairs: 100,
        test_pairs: 200,
        min_len: 3,
        max_len: 12,
        zipf_s: 1.05,
    }
}

fn train_config(max_steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        warmup: 100,
        batch_size: 16,
        eval_every: 250,
        max_steps,
        seed,
        ..TrainConfig::default()
    }
}

fn pair(src: LanguageSpec, tgt: LanguageSpec, seed: u64) -> Corpora {
    gen_parallel(&TaskSpec { src, tgt }, &corpus_config(), seed).unwrap()
}

// ── the shared fixture ──────────────────────────────────────────────

struct Lab {
    parent: Model,
    parent_test_bleu: f64,
    ab_test: ParallelCorpus,
    cd_test: ParallelCorpus,
    /// (regime label, seed) → test BLEU for the source-transfer sweep C→B.
    sweep: BTreeMap<(String, u64), f64>,
    xattn_src_child: Child,
    body_src_child: Child,
    xattn_tgt_child: Child,
    body_tgt_child: Child,
    supervised_cd_bleu: f64,
    denoise_embonly_bleu: f64,
    /// Criterion 2: settings whose frozen tensors moved (empty = pass).
    freeze_violations: Vec<String>,
}

fn finetune(parent: &Model, regime: FineTuneRegime, corpora: &Corpora, seed: u64) -> Child {
    let init = init_child(parent, parent.config.clone(), regime, seed).unwrap();
    let outcome = train(
        init.model,
        &regime.trainable_tags(),
        corpora,
        &train_config(CHILD_STEPS, seed),
    )
    .unwrap();
    Child {
        model: outcome.model,
        regime: init.regime,
        parent_lineage: init.parent_lineage,
    }
}

fn scratch(config: ModelConfig, corpora: &Corpora, seed: u64) -> Model {
    let model = Model::build(config, seed).unwrap();
    train(model, &GroupTag::ALL, corpora, &train_config(CHILD_STEPS, seed))
        .unwrap()
        .model
}

/// Bit-pattern of every parameter outside the regime's trainable set.
fn frozen_bits(model: &Model, trainable: &[GroupTag]) -> Vec<(String, Vec<u64>)> {
    let hot: std::collections::HashSet<usize> =
        model.registry().indices_by_tags(trainable).into_iter().collect();
    model
        .registry()
        .iter()
        .enumerate()
        .filter(|(i, _)| !hot.contains(i))
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.tensor.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn audit_freezes(parent: &Model, cb: &Corpora, ad: &Corpora) -> Vec<String> {
    let mut violations = Vec::new();
    for side in [TransferSide::NewSource, TransferSide::NewTarget] {
        let corpora = match side {
            TransferSide::NewSource => cb,
            TransferSide::NewTarget => ad,
        };
        for setting in [
            RegimeSetting::Scratch,
            RegimeSetting::EmbOnly,
            RegimeSetting::EmbBody,
            RegimeSetting::EmbXattn,
            RegimeSetting::EmbRandXattn,
        ] {
            let regime = FineTuneRegime::new(setting, side);
            let tags = regime.trainable_tags();
            let (init_model, label) = if setting == RegimeSetting::Scratch {
                (Model::build(parent.config.clone(), 21).unwrap(), regime.label())
            } else {
                (init_child(parent, parent.config.clone(), regime, 21).unwrap().model, regime.label())
            };
            let before = frozen_bits(&init_model, &tags);
            let mut cfg = train_config(FREEZE_STEPS, 21);
            cfg.eval_every = 0; // the audit cares about bits, not BLEU
            let outcome = train(init_model, &tags, corpora, &cfg).unwrap();
            let after = frozen_bits(&outcome.model, &tags);
            if before != after {
                violations.push(label);
            }
        }
    }
    violations
}

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let config = desk_model_config();

        // Corpora. Data seeds differ per pair so no split leaks into another.
        let ab = pair(lang_a(), lang_b(), 10);
        let cb = pair(lang_c(), lang_b(), 11);
        let ad = pair(lang_a(), lang_d(), 12);
        let cd = pair(lang_c(), lang_d(), 13);
        let den = gen_denoise(&lang_b(), &corpus_config(), &NoiseConfig::default(), 14).unwrap();

        // Translation parent A→B.
        let parent = train(
            Model::build(config.clone(), 10).unwrap(),
            &GroupTag::ALL,
            &ab,
            &train_config(PARENT_STEPS, 10),
        )
        .unwrap()
        .model;
        let parent_test_bleu = evaluate_bleu(&parent, &ab.test).unwrap();

        // Denoising parent over language B, same budget and protocol.
        let denoise_parent = train(
            Model::build(config.clone(), 14).unwrap(),
            &GroupTag::ALL,
            &den,
            &train_config(PARENT_STEPS, 14),
        )
        .unwrap()
        .model;

        // Source-transfer sweep C→B: 5 regimes × 3 seeds.
        let mut sweep = BTreeMap::new();
        let mut keep: BTreeMap<(String, u64), Child> = BTreeMap::new();
        for &seed in &SEEDS {
            let bleu = evaluate_bleu(&scratch(config.clone(), &cb, seed), &cb.test).unwrap();
            sweep.insert(("SCRATCH".to_string(), seed), bleu);
            for setting in [
                RegimeSetting::EmbOnly,
                RegimeSetting::EmbBody,
                RegimeSetting::EmbXattn,
                RegimeSetting::EmbRandXattn,
            ] {
                let regime = FineTuneRegime::new(setting, TransferSide::NewSource);
                let child = finetune(&parent, regime, &cb, seed);
                let bleu = evaluate_bleu(&child.model, &cb.test).unwrap();
                sweep.insert((setting.label().to_string(), seed), bleu);
                if seed == SEEDS[0]
                    && matches!(setting, RegimeSetting::EmbXattn | RegimeSetting::EmbBody)
                {
                    keep.insert((setting.label().to_string(), seed), child);
                }
            }
        }
        let xattn_src_child = keep.remove(&("EMB_XATTN".to_string(), SEEDS[0])).unwrap();
        let body_src_child = keep.remove(&("EMB_BODY".to_string(), SEEDS[0])).unwrap();

        // Target-transfer children A→D for composition.
        let xattn_tgt_child = finetune(
            &parent,
            FineTuneRegime::new(RegimeSetting::EmbXattn, TransferSide::NewTarget),
            &ad,
            SEEDS[0],
        );
        let body_tgt_child = finetune(
            &parent,
            FineTuneRegime::new(RegimeSetting::EmbBody, TransferSide::NewTarget),
            &ad,
            SEEDS[0],
        );

        // Supervised C→D baseline from scratch on child-sized data.
        let supervised_cd_bleu =
            evaluate_bleu(&scratch(config.clone(), &cd, SEEDS[0]), &cd.test).unwrap();

        // EMB_ONLY transfer from the denoising parent, same child task.
        let den_child = finetune(
            &denoise_parent,
            FineTuneRegime::new(RegimeSetting::EmbOnly, TransferSide::NewSource),
            &cb,
            SEEDS[0],
        );
        let denoise_embonly_bleu = evaluate_bleu(&den_child.model, &cb.test).unwrap();

        let freeze_violations = audit_freezes(&parent, &cb, &ad);

        Lab {
            parent,
            parent_test_bleu,
            ab_test: ab.test,
            cd_test: cd.test,
            sweep,
            xattn_src_child,
            body_src_child,
            xattn_tgt_child,
            body_tgt_child,
            supervised_cd_bleu,
            denoise_embonly_bleu,
            freeze_violations,
        }
    })
}

fn median(lab: &Lab, label: &str) -> f64 {
    let mut v: Vec<f64> = SEEDS
        .iter()
        .map(|&s| lab.sweep[&(label.to_string(), s)])
        .collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Print the verdict line and fail the test if the criterion does not hold.
fn gate(n: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} {name}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} {name}: {detail}");
}

// ── the ten criteria ────────────────────────────────────────────────

#[test]
fn criterion_01_gradient_correctness() {
    let reports = op_checks(3, None).unwrap();
    let worst_op = reports
        .iter()
        .map(|r| r.report.max_rel_err)
        .fold(0.0f64, f64::max);
    let model_report = gradcheck_model(&desk_model_config(), 3, 128, None).unwrap();
    let ok = reports.iter().all(|r| r.report.pass)
        && model_report.pass
        && worst_op < 1e-4
        && model_report.max_rel_err < 1e-4;
    gate(
        1,
        "gradient correctness",
        ok,
        &format!(
            "worst op rel err {worst_op:.3e}, model rel err {:.3e} over {} coords",
            model_report.max_rel_err, model_report.checked
        ),
    );
}

#[test]
fn criterion_02_freeze_hardness() {
    let lab = lab();
    gate(
        2,
        "freeze hardness",
        lab.freeze_violations.is_empty(),
        &format!(
            "10 settings × {FREEZE_STEPS} steps; violations: {:?}",
            lab.freeze_violations
        ),
    );
}

#[test]
fn criterion_03_regime_quality_ordering() {
    let lab = lab();
    let body = median(lab, "EMB_BODY");
    let xattn = median(lab, "EMB_XATTN");
    let only = median(lab, "EMB_ONLY");
    let scratch = median(lab, "SCRATCH");
    let ok = body >= xattn && xattn >= body - 3.0 && xattn >= only + 2.0 && xattn > scratch;
    gate(
        3,
        "regime quality ordering",
        ok,
        &format!(
            "median BLEU body {body:.2}, xattn {xattn:.2}, emb-only {only:.2}, scratch {scratch:.2}"
        ),
    );
}

#[test]
fn criterion_04_random_xattn_penalty() {
    let lab = lab();
    let rand = median(lab, "EMB_RANDXATTN");
    let xattn = median(lab, "EMB_XATTN");
    gate(
        4,
        "random cross-attention penalty",
        rand < xattn - 1.0,
        &format!("median BLEU randxattn {rand:.2} vs xattn {xattn:.2}"),
    );
}

#[test]
fn criterion_05_embedding_alignment() {
    let lab = lab();
    let parent_emb = EmbeddingMatrix::from_model(&lab.parent, GroupTag::Src).unwrap();
    let gold = GoldDictionary::new(gold_dictionary(&lang_c(), &lang_a()).unwrap());
    let eval_types: Vec<usize> = (NUM_SPECIALS..VOCAB).collect();
    let mut acc = BTreeMap::new();
    for (label, child) in [
        ("EMB_XATTN", &lab.xattn_src_child),
        ("EMB_BODY", &lab.body_src_child),
    ] {
        let child_emb = EmbeddingMatrix::from_model(&child.model, GroupTag::Src).unwrap();
        let induced = induce_lexicon(&child_emb, &parent_emb, &eval_types).unwrap();
        let score = lexicon_accuracy(&induced, &gold).unwrap();
        acc.insert(label, score.accuracy);
    }
    let xattn = acc["EMB_XATTN"];
    let body = acc["EMB_BODY"];
    gate(
        5,
        "embedding alignment",
        xattn >= 0.70 && xattn >= body + 0.20,
        &format!("lexicon accuracy xattn {xattn:.3}, body {body:.3}"),
    );
}

#[test]
fn criterion_06_forgetting_mitigation() {
    let lab = lab();
    let restored_xattn = ckpt::restore_parent_embeddings(&lab.xattn_src_child, &lab.parent).unwrap();
    let restored_body = ckpt::restore_parent_embeddings(&lab.body_src_child, &lab.parent).unwrap();
    let xattn_bleu = evaluate_bleu(&restored_xattn, &lab.ab_test).unwrap();
    let body_bleu = evaluate_bleu(&restored_body, &lab.ab_test).unwrap();
    let ok = xattn_bleu >= body_bleu + 5.0 && xattn_bleu >= 0.8 * lab.parent_test_bleu;
    gate(
        6,
        "forgetting mitigation",
        ok,
        &format!(
            "restored parent-task BLEU xattn {xattn_bleu:.2}, body {body_bleu:.2}, parent {:.2}",
            lab.parent_test_bleu
        ),
    );
}

#[test]
fn criterion_07_zero_shot_composition() {
    let lab = lab();
    let composed_xattn =
        ckpt::compose_zero_shot(&lab.xattn_src_child, &lab.xattn_tgt_child, false).unwrap();
    let composed_body =
        ckpt::compose_zero_shot(&lab.body_src_child, &lab.body_tgt_child, true).unwrap();
    let xattn_bleu = evaluate_bleu(&composed_xattn, &lab.cd_test).unwrap();
    let body_bleu = evaluate_bleu(&composed_body, &lab.cd_test).unwrap();
    let ok = xattn_bleu >= 5.0
        && xattn_bleu >= 0.4 * lab.supervised_cd_bleu
        && body_bleu < xattn_bleu;
    gate(
        7,
        "zero-shot composition",
        ok,
        &format!(
            "composed xattn {xattn_bleu:.2}, composed body {body_bleu:.2}, supervised {:.2}",
            lab.supervised_cd_bleu
        ),
    );
}

#[test]
fn criterion_08_denoising_parent_gap() {
    let lab = lab();
    let translation = lab.sweep[&("EMB_ONLY".to_string(), SEEDS[0])];
    let denoise = lab.denoise_embonly_bleu;
    gate(
        8,
        "denoising-parent gap",
        denoise <= translation - 2.0,
        &format!("EMB_ONLY BLEU from denoise parent {denoise:.2} vs translation parent {translation:.2}"),
    );
}

#[test]
fn criterion_09_storage_accounting() {
    let config = desk_model_config();
    let counts = Model::count_by_group(&config);

    // Exactness: the report must equal direct registry enumeration.
    let mut exact = true;
    for tags in [
        vec![GroupTag::Src],
        vec![GroupTag::Src, GroupTag::Xattn],
        vec![GroupTag::Src, GroupTag::Enc, GroupTag::Dec, GroupTag::Xattn],
        GroupTag::ALL.to_vec(),
    ] {
        let report = ckpt::storage_report(&config, &tags).unwrap();
        let want: usize = tags.iter().map(|t| counts[t]).sum();
        exact &= report.stored_params == want
            && report.total_params == counts.values().sum::<usize>();
    }

    // Regime monotonicity on the stored fraction.
    let frac = |setting: RegimeSetting| {
        let regime = FineTuneRegime::new(setting, TransferSide::NewSource);
        ckpt::storage_report(&config, &regime.trainable_tags())
            .unwrap()
            .fraction
    };
    let only = frac(RegimeSetting::EmbOnly);
    let xattn = frac(RegimeSetting::EmbXattn);
    let body = frac(RegimeSetting::EmbBody);
    let monotone = only < xattn && xattn < body;

    // Delta checkpoints reload bit-identically through parent + delta.
    let lab = lab();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("child.xattd");
    ckpt::save_delta(&path, &lab.xattn_src_child).unwrap();
    let reloaded = ckpt::load_delta(&path, &lab.parent).unwrap();
    let bits = |m: &Model| -> Vec<u64> {
        m.registry()
            .iter()
            .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let roundtrip = bits(&reloaded.model) == bits(&lab.xattn_src_child.model)
        && reloaded.regime == lab.xattn_src_child.regime
        && reloaded.parent_lineage == lab.xattn_src_child.parent_lineage;

    gate(
        9,
        "storage accounting",
        exact && monotone && roundtrip,
        &format!(
            "exact {exact}, fractions {only:.4} < {xattn:.4} < {body:.4} = {monotone}, delta roundtrip {roundtrip}"
        ),
    );
}

#[test]
fn criterion_10_scorer_sanity() {
    let corpus = vec![vec![4, 5, 6, 7, 8], vec![9, 10, 11]];
    let self_score = corpus_bleu(&corpus, &corpus).unwrap();
    // hyp = a b c d vs ref = a b c d e: all precisions 1, BP = e^(−1/4).
    let worked = corpus_bleu(&[vec![10, 11, 12, 13]], &[vec![10, 11, 12, 13, 14]]).unwrap();
    let ok = self_score == 100.0 && (worked - 77.880_078_307_140_49).abs() < 1e-9;
    gate(
        10,
        "scorer sanity",
        ok,
        &format!("self BLEU {self_score}, worked example {worked:.12}"),
    );
}
