//! Synthetic data layer: word-level substitution-cipher corpora over a shared
//! latent sentence, deterministic toy spectrogram synthesis, manifests and
//! batch types.

pub mod bpe;
mod manifest;
mod synth;

pub use bpe::{bpe_train, vocab_fingerprint, BpeModel, CachedEncoder};
pub use bpe::{BOS_ID, EOS_ID, PAD_ID, UNK_ID};
pub use manifest::{
    Batch, BatchSource, CorpusManifest, Dataset, Example, ManifestRecord, SourceData, SpeechBatch,
    Split, TokenBatch,
};
pub use synth::{nearest_template_decode, synth_alphabet, synth_speech, SpeechSynthSpec};

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::speech::write_features;

/// Shape of a generated toy corpus. Each latent sentence is rendered into
/// every language by a per-language word substitution, so translation is a
/// learnable bijection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub languages: Vec<String>,
    pub latent_vocab: usize,
    pub train_sentences: usize,
    pub valid_sentences: usize,
    pub test_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub speech: SpeechSpec,
}

/// Which language gets synthetic audio, and how it sounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechSpec {
    pub language: String,
    #[serde(flatten)]
    pub synth: SpeechSynthSpec,
}

impl ToyCorpusSpec {
    /// 4 languages, 500 latent words, 2000 training sentences.
    pub fn toy_default() -> Self {
        ToyCorpusSpec {
            languages: vec!["en".into(), "de".into(), "fr".into(), "es".into()],
            latent_vocab: 500,
            train_sentences: 2000,
            valid_sentences: 200,
            test_sentences: 200,
            min_words: 3,
            max_words: 8,
            speech: SpeechSpec { language: "en".into(), synth: SpeechSynthSpec::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.len() < 2 {
            return Err(Error::config("need at least two languages"));
        }
        self.surface_letters()?;
        if self.latent_vocab == 0 {
            return Err(Error::config("latent vocabulary must be >= 1"));
        }
        if self.train_sentences == 0 {
            return Err(Error::config("need at least one training sentence"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::config(format!(
                "bad sentence length range [{}, {}]",
                self.min_words, self.max_words
            )));
        }
        if !self.languages.contains(&self.speech.language) {
            return Err(Error::config(format!(
                "speech language '{}' is not in the language list",
                self.speech.language
            )));
        }
        self.speech.synth.validate()?;
        Ok(())
    }
}

impl ToyCorpusSpec {
    /// One marker letter per language: the first character of the tag that no
    /// earlier language claimed (en -> 'e', de -> 'd', fr -> 'f', es -> 's').
    pub fn surface_letters(&self) -> Result<std::collections::BTreeMap<String, char>> {
        let mut used = HashSet::new();
        let mut letters = std::collections::BTreeMap::new();
        for lang in &self.languages {
            if lang.is_empty() || !lang.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::config(format!(
                    "language tag '{lang}' must be non-empty lowercase ascii"
                )));
            }
            let Some(letter) = lang.chars().find(|c| !used.contains(c)) else {
                return Err(Error::config(format!(
                    "no unused marker letter left for language '{lang}'"
                )));
            };
            used.insert(letter);
            if letters.insert(lang.clone(), letter).is_some() {
                return Err(Error::config(format!("language '{lang}' listed twice")));
            }
        }
        Ok(letters)
    }
}

/// Surface form of latent word `i` under a language's marker letter
/// ("w3" -> en "e3", de "d3").
pub fn surface_word(letter: char, latent: u32) -> String {
    format!("{letter}{latent}")
}

pub fn render_sentence(letter: char, latent_words: &[u32]) -> String {
    latent_words
        .iter()
        .map(|&w| surface_word(letter, w))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSentence {
    pub sid: String,
    pub split: Split,
    pub words: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub spec: ToyCorpusSpec,
    pub seed: u64,
    pub sentences: Vec<LatentSentence>,
    letters: std::collections::BTreeMap<String, char>,
}

impl ToyCorpus {
    pub fn text(&self, sentence: &LatentSentence, lang: &str) -> Result<String> {
        let letter = self
            .letters
            .get(lang)
            .ok_or_else(|| Error::not_found(format!("language '{lang}' not in corpus")))?;
        Ok(render_sentence(*letter, &sentence.words))
    }

    pub fn sentences_in(&self, split: Split) -> impl Iterator<Item = &LatentSentence> {
        self.sentences.iter().filter(move |s| s.split == split)
    }
}

/// Samples the latent corpus: seeded, split-disjoint (no latent sentence is
/// repeated verbatim across splits).
pub fn gen_toy_corpus(spec: &ToyCorpusSpec, seed: u64) -> Result<ToyCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, "toy-corpus", 0));
    let total = spec.train_sentences + spec.valid_sentences + spec.test_sentences;
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(total);
    let mut sentences = Vec::with_capacity(total);
    for idx in 0..total {
        let split = if idx < spec.train_sentences {
            Split::Train
        } else if idx < spec.train_sentences + spec.valid_sentences {
            Split::Valid
        } else {
            Split::Test
        };
        let words = loop {
            let len = rng.gen_range(spec.min_words..=spec.max_words);
            let candidate: Vec<u32> =
                (0..len).map(|_| rng.gen_range(0..spec.latent_vocab as u32)).collect();
            if seen.insert(candidate.clone()) {
                break candidate;
            }
        };
        sentences.push(LatentSentence { sid: format!("s{idx:06}"), split, words });
    }
    let letters = spec.surface_letters()?;
    Ok(ToyCorpus { spec: spec.clone(), seed, sentences, letters })
}

/// Writes feature files and the manifest TSV under `out_dir` and returns the
/// manifest. Rows cover every ordered text pair plus transcription and
/// speech-translation rows for the speech language.
pub fn write_corpus(corpus: &ToyCorpus, out_dir: &Path) -> Result<CorpusManifest> {
    std::fs::create_dir_all(out_dir.join("features"))?;
    let speech_lang = &corpus.spec.speech.language;
    let mut records = Vec::new();
    for sentence in &corpus.sentences {
        let sid = &sentence.sid;
        let feature_rel = format!("features/{sid}.mbsf");
        let speech_text = corpus.text(sentence, speech_lang)?;
        let noise_seed = seeding::derive(corpus.seed, "utterance-noise", fnv_str(sid));
        let features = synth_speech(
            &speech_text,
            &corpus.spec.speech.synth,
            seeding::derive(corpus.seed, "acoustics", 0),
            noise_seed,
        )?;
        let mut buf = Vec::new();
        write_features(&mut buf, &features)?;
        std::fs::write(out_dir.join(&feature_rel), buf)?;

        for src in &corpus.spec.languages {
            for tgt in &corpus.spec.languages {
                if src == tgt {
                    continue;
                }
                records.push(ManifestRecord {
                    id: format!("{sid}.{src}-{tgt}"),
                    src_lang: src.clone(),
                    tgt_lang: tgt.clone(),
                    src: corpus.text(sentence, src)?,
                    tgt: corpus.text(sentence, tgt)?,
                    split: sentence.split,
                });
            }
        }
        // transcription row plus speech-to-text rows into every other language
        records.push(ManifestRecord {
            id: format!("{sid}.{speech_lang}_speech-{speech_lang}"),
            src_lang: speech_lang.clone(),
            tgt_lang: speech_lang.clone(),
            src: feature_rel.clone(),
            tgt: speech_text.clone(),
            split: sentence.split,
        });
        for tgt in &corpus.spec.languages {
            if tgt == speech_lang {
                continue;
            }
            records.push(ManifestRecord {
                id: format!("{sid}.{speech_lang}_speech-{tgt}"),
                src_lang: speech_lang.clone(),
                tgt_lang: tgt.clone(),
                src: feature_rel.clone(),
                tgt: corpus.text(sentence, tgt)?,
                split: sentence.split,
            });
        }
    }
    let manifest = CorpusManifest::new(records)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

fn fnv_str(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cipher_structure_matches_construction() {
        // latent [w3 w7 w1] -> en "e3 e7 e1", de "d3 d7 d1"
        assert_eq!(render_sentence('e', &[3, 7, 1]), "e3 e7 e1");
        assert_eq!(render_sentence('d', &[3, 7, 1]), "d3 d7 d1");
        // 'es' falls back to its second letter because 'en' owns 'e'
        let letters = ToyCorpusSpec::toy_default().surface_letters().unwrap();
        assert_eq!(letters["en"], 'e');
        assert_eq!(letters["es"], 's');
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = small_spec();
        let a = gen_toy_corpus(&spec, 9).unwrap();
        let b = gen_toy_corpus(&spec, 9).unwrap();
        assert_eq!(a.sentences, b.sentences);
        let c = gen_toy_corpus(&spec, 10).unwrap();
        assert_ne!(a.sentences, c.sentences);
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = small_spec();
        let corpus = gen_toy_corpus(&spec, 3).unwrap();
        let mut ids = HashSet::new();
        let mut contents = HashSet::new();
        for s in &corpus.sentences {
            assert!(ids.insert(s.sid.clone()), "duplicate id {}", s.sid);
            assert!(contents.insert(s.words.clone()), "duplicate sentence across splits");
        }
        assert_eq!(corpus.sentences_in(Split::Train).count(), spec.train_sentences);
        assert_eq!(corpus.sentences_in(Split::Valid).count(), spec.valid_sentences);
        assert_eq!(corpus.sentences_in(Split::Test).count(), spec.test_sentences);
    }

    #[test]
    fn exhausted_marker_letters_rejected() {
        let mut spec = small_spec();
        spec.languages = vec!["en".into(), "ne".into(), "nn".into()];
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    fn small_spec() -> ToyCorpusSpec {
        ToyCorpusSpec {
            languages: vec!["en".into(), "de".into()],
            latent_vocab: 40,
            train_sentences: 30,
            valid_sentences: 5,
            test_sentences: 5,
            min_words: 3,
            max_words: 6,
            speech: SpeechSpec { language: "en".into(), synth: SpeechSynthSpec::default() },
        }
    }
}
