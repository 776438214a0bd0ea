//! End-to-end training smoke tests on a miniature cipher corpus: joint MT
//! convergence, determinism, ASR pretraining modes, frozen-decoder coupling
//! and zero-shot routing.

use multislt_core::adapter::AdapterConfig;
use multislt_core::corpus::{
    bpe_train, gen_toy_corpus, vocab_fingerprint, CachedEncoder, Dataset, SourceData, SpeechSpec,
    SpeechSynthSpec, Split, ToyCorpus, ToyCorpusSpec,
};
use multislt_core::eval::{bleu, greedy_decode};
use multislt_core::nn::{TextDecoderConfig, TextEncoderConfig, TransformerConfig};
use multislt_core::registry::{ModuleConfig, ModuleKey, Registry};
use multislt_core::speech::SpeechEncoderConfig;
use multislt_core::training::{couple, pretrain_asr, train_joint_mt, AsrMode, Direction, TrainingConfig};

struct Fixture {
    corpus: ToyCorpus,
    bpe: multislt_core::corpus::BpeModel,
    dir: tempfile::TempDir,
    manifest: multislt_core::corpus::CorpusManifest,
}

fn tiny_spec() -> ToyCorpusSpec {
    ToyCorpusSpec {
        languages: vec!["en".into(), "de".into(), "fr".into()],
        latent_vocab: 50,
        train_sentences: 160,
        valid_sentences: 10,
        test_sentences: 10,
        min_words: 2,
        max_words: 5,
        speech: SpeechSpec { language: "en".into(), synth: SpeechSynthSpec::default() },
    }
}

fn build_fixture() -> Fixture {
    let spec = tiny_spec();
    let corpus = gen_toy_corpus(&spec, 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = multislt_core::corpus::write_corpus(&corpus, dir.path()).unwrap();
    let mut train_texts: Vec<String> = Vec::new();
    for sentence in corpus.sentences_in(Split::Train) {
        for lang in &spec.languages {
            train_texts.push(corpus.text(sentence, lang).unwrap());
        }
    }
    let refs: Vec<&str> = train_texts.iter().map(String::as_str).collect();
    let bpe = bpe_train(refs, 120).unwrap();
    Fixture { corpus, bpe, dir, manifest }
}

fn tiny_transformer() -> TransformerConfig {
    TransformerConfig { d_model: 32, n_heads: 2, n_layers: 1, d_ff: 64, dropout: 0.0, final_layer_norm: true }
}

fn registry_for(fixture: &Fixture) -> Registry {
    let vocab = fixture.bpe.vocab_size();
    let mut registry = Registry::new(vocab, vocab_fingerprint(&fixture.bpe));
    for lang in &fixture.corpus.spec.languages {
        registry
            .register(
                ModuleKey::text_encoder(lang),
                ModuleConfig::TextEncoder(TextEncoderConfig {
                    transformer: tiny_transformer(),
                    vocab_size: vocab,
                }),
                100 + lang.len() as u64 * 7 + lang.bytes().map(u64::from).sum::<u64>(),
            )
            .unwrap();
        registry
            .register(
                ModuleKey::text_decoder(lang),
                ModuleConfig::TextDecoder(TextDecoderConfig {
                    transformer: tiny_transformer(),
                    vocab_size: vocab,
                }),
                200 + lang.bytes().map(u64::from).sum::<u64>(),
            )
            .unwrap();
    }
    registry
        .register(
            ModuleKey::speech_encoder("en"),
            ModuleConfig::SpeechEncoder(SpeechEncoderConfig {
                transformer: tiny_transformer(),
                conv: multislt_core::speech::ConvStackConfig::with_channels(8),
                n_mels: 8,
                adapter: None,
            }),
            300,
        )
        .unwrap();
    registry
}

fn text_dataset(fixture: &Fixture, src: &str, tgt: &str) -> Dataset {
    let mut encoder = CachedEncoder::new(&fixture.bpe);
    let records = fixture.manifest.text_records(src, tgt, Split::Train);
    Dataset::from_records(&records, &mut encoder, fixture.dir.path()).unwrap()
}

fn speech_dataset(fixture: &Fixture, tgt: &str) -> Dataset {
    let mut encoder = CachedEncoder::new(&fixture.bpe);
    let records = fixture.manifest.speech_records("en", tgt, Split::Train);
    Dataset::from_records(&records, &mut encoder, fixture.dir.path()).unwrap()
}

fn mt_directions(fixture: &Fixture) -> Vec<Direction> {
    let mut directions = Vec::new();
    for (src, tgt) in [("en", "de"), ("de", "en"), ("en", "fr"), ("fr", "en")] {
        directions.push(Direction {
            src: ModuleKey::text_encoder(src),
            tgt: ModuleKey::text_decoder(tgt),
            dataset: text_dataset(fixture, src, tgt),
        });
    }
    directions
}

fn train_cfg(steps: u64) -> TrainingConfig {
    TrainingConfig {
        steps,
        batch_sentences: 8,
        peak_lr: 2e-3,
        warmup_steps: 60,
        label_smoothing: 0.0,
        divergence_checks: true,
    }
}

#[test]
fn joint_mt_loss_falls_and_runs_are_bit_identical() {
    let fixture = build_fixture();
    let mut registry = registry_for(&fixture);
    let outcome = train_joint_mt(&mut registry, mt_directions(&fixture), &train_cfg(280), 5).unwrap();

    // per-direction: strictly below the first recorded value
    let mut by_direction: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for r in &outcome.records {
        by_direction.entry(&r.direction).or_default().push(r.loss);
    }
    assert_eq!(by_direction.len(), 4);
    for (direction, losses) in &by_direction {
        let first = losses[0];
        let last: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            last < first * 0.5,
            "{direction}: loss went {first:.3} -> {last:.3}, expected a clear drop"
        );
    }

    // determinism: a second run from scratch produces bit-identical modules
    let mut registry2 = registry_for(&fixture);
    let outcome2 = train_joint_mt(&mut registry2, mt_directions(&fixture), &train_cfg(280), 5).unwrap();
    assert_eq!(outcome.records, outcome2.records);
    for (key, module) in registry.modules() {
        let other = registry2.get(key).unwrap();
        assert_eq!(module.params.checksum(), other.params.checksum(), "{key} differs across runs");
    }

    // a different seed must not collide
    let mut registry3 = registry_for(&fixture);
    let outcome3 = train_joint_mt(&mut registry3, mt_directions(&fixture), &train_cfg(280), 6).unwrap();
    assert_ne!(outcome.records, outcome3.records);

    // greedy decoding of a training sentence approaches the reference
    let mut encoder = CachedEncoder::new(&fixture.bpe);
    let records = fixture.manifest.text_records("en", "de", Split::Train);
    let sample: Vec<_> = records.iter().take(24).collect();
    let path = registry.route(&ModuleKey::text_encoder("en"), &ModuleKey::text_decoder("de")).unwrap();
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for r in sample {
        let ids = encoder.encode(&r.src);
        let out = greedy_decode(&registry, &path, &SourceData::Text(ids), 32).unwrap();
        hyps.push(fixture.bpe.decode(&out));
        refs.push(r.tgt.clone());
    }
    let score = bleu(&hyps, &refs).unwrap();
    assert!(score > 30.0, "train BLEU after short run too low: {score}");
}

#[test]
fn asr_pretraining_modes_respect_the_decoder_freeze_contract() {
    let fixture = build_fixture();
    let mut registry = registry_for(&fixture);
    // give the en decoder some initial training so coupling later is legal
    train_joint_mt(
        &mut registry,
        mt_directions(&fixture),
        &train_cfg(60),
        5,
    )
    .unwrap();
    let asr_data = speech_dataset(&fixture, "en");
    let speech_key = ModuleKey::speech_encoder("en");
    let dec_key = ModuleKey::text_decoder("en");

    // langspec: decoder checksum invariant
    let before = registry.get(&dec_key).unwrap().params.checksum();
    let mut langspec = registry.clone();
    pretrain_asr(&mut langspec, &speech_key, &dec_key, &asr_data, &train_cfg(40), 9, AsrMode::Langspec)
        .unwrap();
    assert_eq!(langspec.get(&dec_key).unwrap().params.checksum(), before);
    assert_ne!(
        langspec.get(&speech_key).unwrap().params.checksum(),
        registry.get(&speech_key).unwrap().params.checksum()
    );

    // baseline: decoder changes
    let mut baseline = registry.clone();
    pretrain_asr(&mut baseline, &speech_key, &dec_key, &asr_data, &train_cfg(40), 9, AsrMode::Baseline)
        .unwrap();
    assert_ne!(baseline.get(&dec_key).unwrap().params.checksum(), before);
}

#[test]
fn coupling_freezes_decoder_and_enables_zero_shot_routes() {
    let fixture = build_fixture();
    let mut registry = registry_for(&fixture);
    train_joint_mt(&mut registry, mt_directions(&fixture), &train_cfg(120), 5).unwrap();
    let speech_key = ModuleKey::speech_encoder("en");
    pretrain_asr(
        &mut registry,
        &speech_key,
        &ModuleKey::text_decoder("en"),
        &speech_dataset(&fixture, "en"),
        &train_cfg(60),
        9,
        AsrMode::Langspec,
    )
    .unwrap();

    let de_dec = ModuleKey::text_decoder("de");
    let de_before = registry.get(&de_dec).unwrap().params.checksum();
    let outcome = couple(
        &mut registry,
        &speech_key,
        &de_dec,
        &speech_dataset(&fixture, "de"),
        Some(AdapterConfig::new(16)),
        &train_cfg(60),
        11,
        false,
    )
    .unwrap();
    assert!(!outcome.records.is_empty());
    assert_eq!(registry.get(&de_dec).unwrap().params.checksum(), de_before, "frozen decoder moved");
    // adapter got attached and trained
    let speech = registry.get(&speech_key).unwrap();
    assert!(speech.params.contains("adapter.w1"));

    // zero-shot: the fr decoder was never coupled with speech, yet routes
    let path = registry.route(&speech_key, &ModuleKey::text_decoder("fr")).unwrap();
    let mut encoder = CachedEncoder::new(&fixture.bpe);
    let records = fixture.manifest.speech_records("en", "fr", Split::Train);
    let dataset = Dataset::from_records(&records[..1], &mut encoder, fixture.dir.path()).unwrap();
    let out = greedy_decode(&registry, &path, &dataset.examples[0].source, 24).unwrap();
    assert!(!out.is_empty(), "zero-shot decode produced nothing");
    assert!(!registry.is_supervised_pair(&speech_key, &ModuleKey::text_decoder("fr")));
    assert!(registry.is_supervised_pair(&speech_key, &de_dec));
}

#[test]
fn couple_rejects_untrained_decoder_and_unpretrained_encoder() {
    let fixture = build_fixture();
    let mut registry = registry_for(&fixture);
    let speech_key = ModuleKey::speech_encoder("en");
    let de_dec = ModuleKey::text_decoder("de");
    let data = speech_dataset(&fixture, "de");

    // decoder untrained
    let err = couple(&mut registry, &speech_key, &de_dec, &data, None, &train_cfg(5), 1, false)
        .unwrap_err();
    assert!(err.to_string().contains("untrained"), "{err}");

    // train decoder, leave encoder unpretrained
    train_joint_mt(&mut registry, mt_directions(&fixture), &train_cfg(8), 5).unwrap();
    let err = couple(&mut registry, &speech_key, &de_dec, &data, None, &train_cfg(5), 1, false)
        .unwrap_err();
    assert!(err.to_string().contains("pretrained"), "{err}");

    // from_scratch waives the pretraining requirement
    couple(&mut registry, &speech_key, &de_dec, &data, None, &train_cfg(5), 1, true).unwrap();
}

#[test]
fn frozen_module_in_joint_mt_is_a_config_error() {
    let fixture = build_fixture();
    let mut registry = registry_for(&fixture);
    registry.freeze(&ModuleKey::text_decoder("de")).unwrap();
    let err = train_joint_mt(&mut registry, mt_directions(&fixture), &train_cfg(4), 5).unwrap_err();
    assert!(err.to_string().contains("frozen"), "{err}");
}
