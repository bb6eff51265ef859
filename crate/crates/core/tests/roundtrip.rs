use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wwh_core::augment::{augment_casual, AugmentConfig, Augmenter};
use wwh_core::corpus::{load_corpus, Speaker};
use wwh_core::serialize::{deserialize, serialize, Example, InstanceMeta, LayoutConfig};
use wwh_core::synth::{generate_casual, generate_mspd, Flavor, GeneratorConfig, TemplateBank};
use wwh_core::vocab::{build_vocab, Vocab};
use wwh_core::Corpus;

fn gen(n: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_episodes: n,
        seed,
        ..GeneratorConfig::default()
    }
}

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.jsonl");
    let corpus = generate_mspd(&gen(1, 3)).unwrap();
    corpus.write(&path).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back.episodes.len(), 1);
    assert_eq!(back, corpus);
}

#[test]
fn default_corpora_keep_the_vocabulary_small() {
    let cfg = GeneratorConfig::default();
    let mut corpora = vec![generate_mspd(&cfg).unwrap()];
    for f in [Flavor::Daily, Flavor::Knowledge, Flavor::Empathy] {
        corpora.push(generate_casual(&cfg, f).unwrap());
    }
    let refs: Vec<&Corpus> = corpora.iter().collect();
    let vocab = build_vocab(&refs, 1).unwrap();
    assert!(vocab.len() < 4096, "{}", vocab.len());
}

fn canon(v: &Vocab, text: &str) -> String {
    v.decode(&v.encode(text))
}

fn canonical(v: &Vocab, ex: &Example, rtl_slot: bool) -> Example {
    Example {
        demographics: ex.demographics.clone(),
        persona: ex.persona.iter().map(|p| canon(v, p)).collect(),
        context: wwh_core::corpus::DialogueContext {
            turns: ex.context.turns.iter().map(|(s, t)| (*s, canon(v, t))).collect(),
        },
        rtl: if rtl_slot { ex.rtl } else { None },
        response: canon(v, &ex.response),
    }
}

#[test]
fn serialize_round_trips_random_instances() {
    let bank = TemplateBank::builtin();
    let mspd = generate_mspd(&gen(40, 8)).unwrap();
    let daily = generate_casual(&gen(20, 9), Flavor::Daily).unwrap();
    let vocab = build_vocab(&[&mspd, &daily], 1).unwrap();
    let aug = Augmenter::new(&bank, AugmentConfig::default(), &mspd.episodes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut truncated = 0;
    for i in 0..1000 {
        let casual = i % 4 == 0;
        let corpus = if casual { &daily } else { &mspd };
        let e = &corpus.episodes[rng.gen_range(0..corpus.episodes.len())];
        let si = rng.gen_range(0..e.sessions.len());
        let agents: Vec<usize> = e.sessions[si]
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == Speaker::Agent)
            .map(|(i, _)| i)
            .collect();
        let ti = agents[rng.gen_range(0..agents.len())];
        let rho = if casual { augment_casual() } else { aug.augment(e, si, ti).unwrap() };
        let ex = Example::from_turn(e, si, ti, &rho);
        let rtl_slot = rng.gen_bool(0.5);
        let layout = LayoutConfig {
            max_seq_len: 4096,
            rtl_slot,
        };
        let inst = serialize(&ex, &vocab, layout, InstanceMeta::default()).unwrap();
        assert_eq!(inst.meta.dropped_turns, 0);
        let want = canonical(&vocab, &ex, rtl_slot);
        assert_eq!(deserialize(&inst.input_ids, &vocab, layout).unwrap(), want, "instance {i}");

        if ex.context.turns.len() > 1 {
            let tight = LayoutConfig {
                max_seq_len: inst.input_ids.len() - 1,
                rtl_slot,
            };
            if let Ok(cut) = serialize(&ex, &vocab, tight, InstanceMeta::default()) {
                let back = deserialize(&cut.input_ids, &vocab, tight).unwrap();
                assert!(want.context.turns.ends_with(&back.context.turns), "instance {i}");
                assert!(back.context.turns.len() < want.context.turns.len());
                assert_eq!(back.persona, want.persona);
                assert_eq!(back.response, want.response);
                truncated += 1;
            }
        }
    }
    assert!(truncated > 500, "{truncated}");
}
