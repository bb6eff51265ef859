use std::fs;

use wwh_core::corpus::Rtl;
use wwh_core::eval::{
    evaluate, format_table, perplexity, rtl_accuracy, rtl_predictions, run_sweep, EvalError, EvalOptions, GroundingLevel,
    IdfTable, SweepSpec,
};
use wwh_core::model::{DecodeConfig, ModelConfig, TrainConfig};
use wwh_core::pipeline::{blend, build_eval_set, build_training_set, fit, BlendSpecFile, BuildOptions};
use wwh_core::serialize::{LayoutConfig, TrainingInstance};
use wwh_core::synth::{generate_mspd, GeneratorConfig, TemplateBank};
use wwh_core::vocab::build_vocab;
use wwh_core::{Checkpoint, Checkpoint64, Transformer64};

fn fixture(rtl_slot: bool, episodes: usize) -> (Checkpoint64, Vec<TrainingInstance>) {
    let corpus = generate_mspd(&GeneratorConfig {
        n_episodes: episodes,
        seed: 4,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let vocab = build_vocab(&[&corpus], 1).unwrap();
    let layout = LayoutConfig {
        max_seq_len: 256,
        rtl_slot,
    };
    let opts = BuildOptions {
        k: 3,
        layout,
        ..BuildOptions::default()
    };
    let eval = build_eval_set(&corpus, &vocab, &opts, &TemplateBank::builtin()).unwrap();
    let texts: Vec<&str> = corpus.episodes.iter().flat_map(|e| e.persona_pool.iter().map(|a| a.text.as_str())).collect();
    let model = Transformer64::new(ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        max_seq_len: 256,
        vocab_size: vocab.len(),
        dropout: 0.0,
        ..ModelConfig::default()
    })
    .unwrap();
    let ck = Checkpoint64 {
        model,
        vocab,
        layout,
        idf: IdfTable::from_texts(texts),
        step: 0,
        train: None,
    };
    (ck, eval)
}

#[test]
fn perplexity_two_paths_agree() {
    let (ck, eval) = fixture(true, 3);
    let ppl = perplexity(&ck, &eval).unwrap();
    let (mut sum, mut n) = (0.0, 0usize);
    for inst in &eval {
        let s = ck.score(inst).unwrap();
        n += s.len();
        sum += s.iter().sum::<f64>();
    }
    let other = (-sum / n as f64).exp();
    assert!(((ppl - other) / other).abs() < 1e-9, "{ppl} vs {other}");
}

#[test]
fn uniform_model_has_perplexity_v() {
    let (mut ck, eval) = fixture(true, 2);
    ck.model.params.iter_mut().for_each(|p| *p = 0.0);
    let v = ck.model.vocab_size() as f64;
    let ppl = perplexity(&ck, &eval).unwrap();
    assert!((ppl - v).abs() / v < 1e-9, "{ppl} vs {v}");
}

#[test]
fn report_counts_partition_and_match_predictions() {
    let (ck, eval) = fixture(true, 3);
    let opts = EvalOptions {
        decode: DecodeConfig {
            max_new_tokens: 8,
            ..DecodeConfig::default()
        },
        forced_comparison: true,
        ..EvalOptions::default()
    };
    let r = evaluate(&ck, &eval, &opts).unwrap();
    let g = r.grounding_counts;
    assert_eq!(g.hard + g.soft + g.non_personalized, r.n_instances);
    assert_eq!(r.n_instances, eval.len());
    let preds = rtl_predictions(&ck, &eval, &opts.decode).unwrap();
    let emitted_pr = preds.iter().filter(|p| p.1 == Rtl::Prtl).count();
    assert_eq!(g.hard + g.soft, emitted_pr);
    let acc = r.rtl_accuracy.unwrap();
    assert_eq!(acc, rtl_accuracy(&ck, &eval, &opts.decode).unwrap());
    assert_eq!(acc.n_prtl + acc.n_crtl, eval.len());
    for v in [r.f1, r.p_cover] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(r.ppl > 1.0);
    let forced = r.forced.unwrap();
    assert_eq!(forced.n, acc.n_prtl);
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<wwh_core::eval::EvalReport>(&json).unwrap(), r);
    let _ = GroundingLevel::Hard;
}

#[test]
fn untrained_sampling_is_near_chance() {
    let (ck, eval) = fixture(true, 30);
    let decode = DecodeConfig {
        top_k: Some(2),
        seed: 11,
        ..DecodeConfig::default()
    };
    let acc = rtl_accuracy(&ck, &eval, &decode).unwrap();
    for (a, n) in [(acc.prtl.unwrap(), acc.n_prtl), (acc.crtl.unwrap(), acc.n_crtl)] {
        let sd = (0.25 / n as f64).sqrt();
        assert!((a - 0.5).abs() < 4.0 * sd + 0.05, "accuracy {a} over {n}");
    }
}

#[test]
fn layout_and_empty_errors() {
    let (ck, eval) = fixture(false, 2);
    let r = evaluate(&ck, &eval, &EvalOptions::default()).unwrap();
    assert!(r.rtl_accuracy.is_none());
    assert!(matches!(rtl_accuracy(&ck, &eval, &DecodeConfig::default()), Err(EvalError::Layout { .. })));
    assert!(matches!(perplexity(&ck, &[]), Err(EvalError::Empty)));

    let (with_slot, slotted) = fixture(true, 2);
    assert!(matches!(perplexity(&ck, &slotted), Err(EvalError::Layout { .. })));
    assert!(matches!(perplexity(&with_slot, &eval), Err(EvalError::Layout { .. })));
}

#[test]
fn single_row_sweep_equals_manual_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig {
        n_episodes: 6,
        ..GeneratorConfig::default()
    };
    generate_mspd(&cfg).unwrap().write(&dir.path().join("mspd.jsonl")).unwrap();
    generate_mspd(&GeneratorConfig { seed: 1, n_episodes: 2, ..cfg })
        .unwrap()
        .write(&dir.path().join("heldout.jsonl"))
        .unwrap();
    fs::write(
        dir.path().join("blend.toml"),
        "[[dataset]]\nid = \"pr\"\npath = \"mspd.jsonl\"\nweight = 0.7\nselect = \"pr\"\n\n[[dataset]]\nid = \"npr\"\npath = \"mspd.jsonl\"\nweight = 0.8\nselect = \"npr\"\n",
    )
    .unwrap();
    let src = r#"
blend = "blend.toml"
eval_data = "heldout.jsonl"
seed = 2
eval_limit = 12
[build]
k = 3
[model]
n_layers = 1
d_model = 16
n_heads = 2
[train]
max_steps = 4
batch_size = 2
[eval.decode]
max_new_tokens = 6
[[row]]
name = "only"
weights = { npr = 0.4 }
"#;
    let spec = SweepSpec::parse(src, dir.path()).unwrap();
    let out = dir.path().join("out");
    let results = run_sweep(&spec, &out, |_| {}).unwrap();
    assert_eq!(results.len(), 1);

    let mut bs = BlendSpecFile::load(&dir.path().join("blend.toml")).unwrap();
    bs.datasets[1].weight = 0.4;
    let (manifest, corpora) = blend(&bs, 2).unwrap();
    let opts = BuildOptions { seed: 2, ..spec.build };
    let bank = TemplateBank::builtin();
    let (header, train) = build_training_set(&manifest, &corpora, &opts, &bank).unwrap();
    let ck: Checkpoint = fit(
        &header,
        &train,
        ModelConfig { seed: 2, ..spec.model },
        &TrainConfig { seed: 2, ..spec.train },
        |_| {},
    )
    .unwrap();
    let held = wwh_core::corpus::load_corpus(&dir.path().join("heldout.jsonl")).unwrap();
    let mut eval = build_eval_set(&held, &ck.vocab, &opts, &bank).unwrap();
    eval.truncate(12);
    let manual = evaluate(&ck, &eval, &spec.eval).unwrap();
    assert_eq!(results[0].report, manual);

    assert_eq!(Checkpoint::load(&out.join("only/model.ckpt")).unwrap(), ck);
    let lines = fs::read_to_string(out.join("reports.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    let table = fs::read_to_string(out.join("table.txt")).unwrap();
    assert_eq!(table, format_table(&results));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("row") && rows[1].starts_with("only"));
    assert_eq!(rows[0].len(), rows[1].len());
}

#[test]
fn sweep_spec_rejects_bad_rows() {
    let base = std::path::Path::new("/x");
    assert!(SweepSpec::parse("blend = \"b\"\neval_data = \"e\"\nrow = []\n", base).is_err());
    let dup = "blend = \"b\"\neval_data = \"e\"\n[[row]]\nname = \"a\"\n[[row]]\nname = \"a\"\n";
    assert!(SweepSpec::parse(dup, base).is_err());
    let typo = "blend = \"b\"\neval_data = \"e\"\n[[row]]\nname = \"a\"\nweight = { x = 1.0 }\n";
    assert!(SweepSpec::parse(typo, base).is_err());
}
