//! Byte-pair-encoding subword model: greedy highest-frequency pair merging
//! over whitespace-tokenized words, each terminated by an end-of-word marker
//! symbol. Ties break lexicographically so retraining is deterministic.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// End-of-word marker appended to every word's symbol sequence.
pub const EOW: &str = "</w>";

pub const BPE_FILE_HEADER: &str = "MBBPE 1";

#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: BTreeMap<String, u32>,
    tokens_by_id: Vec<String>,
}

impl BpeModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens_by_id.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens_by_id.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    /// Splits a word into its merged symbol sequence by applying the learned
    /// merges in training order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        symbols.push(EOW.to_string());
        for (left, right) in &self.merges {
            merge_in_place(&mut symbols, left, right);
        }
        symbols
    }

    /// Token ids of a whitespace-tokenized text. Unknown symbols become UNK;
    /// BOS/EOS are added later, at batching.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            for symbol in self.segment_word(word) {
                ids.push(self.vocab.get(&symbol).copied().unwrap_or(UNK_ID));
            }
        }
        ids
    }

    /// Inverse of `encode` on text over the known alphabet: strips specials
    /// and end-of-word markers and rejoins words with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        let mut current = String::new();
        for &id in ids {
            if id == PAD_ID || id == BOS_ID || id == EOS_ID || id == UNK_ID {
                continue;
            }
            let Some(token) = self.token(id) else { continue };
            if let Some(stem) = token.strip_suffix(EOW) {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            } else {
                current.push_str(token);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words.join(" ")
    }

    // ---- model file format ----

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{BPE_FILE_HEADER}")?;
        for (left, right) in &self.merges {
            writeln!(w, "{left} {right}")?;
        }
        writeln!(w, "---")?;
        for (id, token) in self.tokens_by_id.iter().enumerate() {
            writeln!(w, "{token}\t{id}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("empty subword model file"))??;
        if header != BPE_FILE_HEADER {
            return Err(Error::data(format!(
                "bad subword model header '{header}', expected '{BPE_FILE_HEADER}'"
            )));
        }
        let mut merges = Vec::new();
        let mut in_vocab = false;
        let mut entries: Vec<(String, u32)> = Vec::new();
        for line in lines {
            let line = line?;
            if line == "---" {
                in_vocab = true;
                continue;
            }
            if !in_vocab {
                let (left, right) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::data(format!("malformed merge line '{line}'")))?;
                merges.push((left.to_string(), right.to_string()));
            } else {
                let (token, id) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::data(format!("malformed vocab line '{line}'")))?;
                let id: u32 = id
                    .parse()
                    .map_err(|_| Error::data(format!("bad token id in '{line}'")))?;
                entries.push((token.to_string(), id));
            }
        }
        if !in_vocab {
            return Err(Error::data("subword model file has no vocabulary section"));
        }
        entries.sort_by_key(|(_, id)| *id);
        let mut tokens_by_id = Vec::with_capacity(entries.len());
        let mut vocab = BTreeMap::new();
        for (expect, (token, id)) in entries.into_iter().enumerate() {
            if id as usize != expect {
                return Err(Error::data(format!(
                    "non-contiguous token ids: expected {expect}, got {id}"
                )));
            }
            vocab.insert(token.clone(), id);
            tokens_by_id.push(token);
        }
        if tokens_by_id.len() < 4 {
            return Err(Error::data("vocabulary is missing the special tokens"));
        }
        Ok(BpeModel { merges, vocab, tokens_by_id })
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.save(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::data(format!("cannot read subword model {}: {e}", path.display())))?;
        Self::load(&mut std::io::BufReader::new(bytes.as_slice()))
    }
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let fused = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = fused;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Learns `n_merges` merges by greedy highest-frequency pair counting over
/// the corpus words; ties break toward the lexicographically smaller pair.
/// Stops early once no pairs remain.
pub fn bpe_train<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    n_merges: usize,
) -> Result<BpeModel> {
    if n_merges < 1 {
        return Err(Error::config("bpe training needs n_merges >= 1"));
    }
    // distinct words with counts
    let mut word_counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for line in corpus {
        for word in line.split_whitespace() {
            let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
            symbols.push(EOW.to_string());
            *word_counts.entry(symbols).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::data("bpe training corpus has no words"));
    }

    // alphabet: every single symbol, before any merge
    let mut alphabet: Vec<String> = Vec::new();
    for word in word_counts.keys() {
        for s in word {
            if !alphabet.contains(s) {
                alphabet.push(s.clone());
            }
        }
    }

    let mut words: Vec<(Vec<String>, u64)> = word_counts.into_iter().collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    for _ in 0..n_merges {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += count;
            }
        }
        // first maximum in sorted order == lexicographically smallest winner
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(pair, _)| pair.clone());
        let Some((left, right)) = best else { break };
        for (symbols, _) in words.iter_mut() {
            merge_in_place(symbols, &left, &right);
        }
        merges.push((left, right));
    }

    // vocabulary: specials, then every alphabet symbol and merge product,
    // sorted for deterministic id assignment
    let mut tokens: Vec<String> = alphabet;
    for (left, right) in &merges {
        let fused = format!("{left}{right}");
        if !tokens.contains(&fused) {
            tokens.push(fused);
        }
    }
    tokens.sort();
    let mut tokens_by_id =
        vec![PAD_TOKEN.to_string(), BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens_by_id.extend(tokens);
    let vocab: BTreeMap<String, u32> = tokens_by_id
        .iter()
        .enumerate()
        .map(|(id, t)| (t.clone(), id as u32))
        .collect();
    Ok(BpeModel { merges, vocab, tokens_by_id })
}

/// FNV-1a over the serialized model, recorded in checkpoints so a registry
/// can refuse mismatched vocabularies.
pub fn vocab_fingerprint(model: &BpeModel) -> u64 {
    let mut buf = Vec::new();
    model.save(&mut buf).expect("serializing to memory cannot fail");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in buf {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Memoizes per-word segmentations; encoding a corpus hits each distinct
/// word once.
pub struct CachedEncoder<'m> {
    model: &'m BpeModel,
    cache: HashMap<String, Vec<u32>>,
}

impl<'m> CachedEncoder<'m> {
    pub fn new(model: &'m BpeModel) -> Self {
        CachedEncoder { model, cache: HashMap::new() }
    }

    pub fn encode(&mut self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            if let Some(cached) = self.cache.get(word) {
                ids.extend_from_slice(cached);
                continue;
            }
            let word_ids: Vec<u32> = self
                .model
                .segment_word(word)
                .into_iter()
                .map(|s| self.model.id(&s).unwrap_or(UNK_ID))
                .collect();
            ids.extend_from_slice(&word_ids);
            self.cache.insert(word.to_string(), word_ids);
        }
        ids
    }

    pub fn model(&self) -> &BpeModel {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_is_highest_count_pair() {
        // {"abab" x3, "ab" x1}: pair (a,b) occurs 2*3 + 1 = 7 times
        let corpus = ["abab abab abab ab"];
        let model = bpe_train(corpus, 1).unwrap();
        assert_eq!(model.merges(), &[("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn merged_word_token_count() {
        let corpus = ["abab abab abab ab"];
        let model = bpe_train(corpus, 1).unwrap();
        // after merge (a,b): "abab" -> [ab, ab, </w>] -> 3 tokens... the merge
        // produces symbol "ab" twice plus the end marker
        let seg = model.segment_word("abab");
        assert_eq!(seg, vec!["ab", "ab", EOW]);
    }

    #[test]
    fn exhausted_pairs_stop_early() {
        let corpus = ["ab"];
        // only pairs (a,b) and (b,</w>) and then (ab,</w>) etc. exist; ask for
        // far more merges than available
        let model = bpe_train(corpus, 50).unwrap();
        assert!(model.merges().len() < 50);
        assert_eq!(model.decode(&model.encode("ab")), "ab");
    }

    #[test]
    fn retraining_is_deterministic() {
        let corpus = ["e3 e41 e5 e3", "e41 e41 e9"];
        let a = bpe_train(corpus, 10).unwrap();
        let b = bpe_train(corpus, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip_over_corpus_sentences() {
        let sentences = ["e3 e41 e5", "e41 e9 e3 e12", "e5"];
        let model = bpe_train(sentences, 25).unwrap();
        for s in sentences {
            assert_eq!(model.decode(&model.encode(s)), s);
        }
    }

    #[test]
    fn empty_string_encodes_to_nothing() {
        let model = bpe_train(["ab"], 1).unwrap();
        assert!(model.encode("").is_empty());
    }

    #[test]
    fn unknown_characters_become_unk() {
        let model = bpe_train(["ab"], 1).unwrap();
        let ids = model.encode("aZ");
        assert!(ids.contains(&UNK_ID));
    }

    #[test]
    fn save_load_round_trip() {
        let model = bpe_train(["e3 e41 e5 d3 d41", "d41 e41"], 12).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = BpeModel::load(&mut std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(model, back);
        assert_eq!(vocab_fingerprint(&model), vocab_fingerprint(&back));
    }

    #[test]
    fn zero_merges_is_config_error() {
        assert!(matches!(bpe_train(["ab"], 0), Err(Error::Config(_))));
    }

    #[test]
    fn specials_occupy_fixed_ids() {
        let model = bpe_train(["ab"], 1).unwrap();
        assert_eq!(model.id(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(model.id(BOS_TOKEN), Some(BOS_ID));
        assert_eq!(model.id(EOS_TOKEN), Some(EOS_ID));
        assert_eq!(model.id(UNK_TOKEN), Some(UNK_ID));
    }

    #[test]
    fn cached_encoder_matches_direct_encoding() {
        let model = bpe_train(["e3 e41 e5", "e41 e9"], 8).unwrap();
        let mut cached = CachedEncoder::new(&model);
        for text in ["e3 e41", "e41 e41 e9", "e5 e3"] {
            assert_eq!(cached.encode(text), model.encode(text));
        }
    }
}
