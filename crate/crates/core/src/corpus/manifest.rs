//! Corpus manifests (TSV), example datasets and padded batch types.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bpe::{BOS_ID, EOS_ID, PAD_ID};
use super::CachedEncoder;
use crate::error::{Error, Result};
use crate::speech::{load_features, SpectrogramFeatures};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "id\tsrc_lang\ttgt_lang\tsrc\ttgt\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parallel example: `src` is either text or a feature-file path
/// (relative to the manifest), `tgt` is always text.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: String,
    pub tgt: String,
    pub split: Split,
}

impl ManifestRecord {
    pub fn is_speech(&self) -> bool {
        self.src.ends_with(".mbsf")
    }

    /// The underlying sentence id shared by all renderings of one latent
    /// sentence ("s000017.en-de" -> "s000017").
    pub fn sentence_id(&self) -> &str {
        self.id.split('.').next().unwrap_or(&self.id)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CorpusManifest {
    records: Vec<ManifestRecord>,
}

impl CorpusManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut ids = std::collections::HashSet::with_capacity(records.len());
        for r in &records {
            for (field, value) in [
                ("id", &r.id),
                ("src_lang", &r.src_lang),
                ("tgt_lang", &r.tgt_lang),
                ("src", &r.src),
                ("tgt", &r.tgt),
            ] {
                if value.contains('\t') || value.contains('\n') {
                    return Err(Error::data(format!(
                        "manifest field {field} of '{}' contains a tab or newline",
                        r.id
                    )));
                }
            }
            if !ids.insert(r.id.clone()) {
                return Err(Error::data(format!("duplicate manifest id '{}'", r.id)));
            }
        }
        Ok(CorpusManifest { records })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Text-to-text records of one direction and split.
    pub fn text_records(&self, src_lang: &str, tgt_lang: &str, split: Split) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| {
                !r.is_speech() && r.src_lang == src_lang && r.tgt_lang == tgt_lang && r.split == split
            })
            .collect()
    }

    /// Speech-source records of one direction and split.
    pub fn speech_records(&self, src_lang: &str, tgt_lang: &str, split: Split) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| {
                r.is_speech() && r.src_lang == src_lang && r.tgt_lang == tgt_lang && r.split == split
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.records.len() * 48);
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id, r.src_lang, r.tgt_lang, r.src, r.tgt, r.split
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            Some(h) => {
                return Err(Error::data(format!(
                    "bad manifest header '{h}', expected '{MANIFEST_HEADER}'"
                )))
            }
            None => return Err(Error::data("manifest file is empty")),
        }
        let mut records = Vec::new();
        for (no, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::data(format!(
                    "manifest line {} has {} fields, expected 6",
                    no + 2,
                    fields.len()
                )));
            }
            records.push(ManifestRecord {
                id: fields[0].to_string(),
                src_lang: fields[1].to_string(),
                tgt_lang: fields[2].to_string(),
                src: fields[3].to_string(),
                tgt: fields[4].to_string(),
                split: Split::parse(fields[5])?,
            });
        }
        CorpusManifest::new(records)
    }

    /// Checks that every referenced feature file exists and parses.
    pub fn verify_features(&self, base_dir: &Path) -> Result<()> {
        let mut checked = std::collections::HashSet::new();
        for r in &self.records {
            if r.is_speech() && checked.insert(r.src.clone()) {
                load_features(&base_dir.join(&r.src)).map_err(|e| {
                    Error::data(format!("feature file '{}' referenced by '{}': {e}", r.src, r.id))
                })?;
            }
        }
        Ok(())
    }
}

/// Source side of one example.
#[derive(Clone, Debug)]
pub enum SourceData {
    Text(Vec<u32>),
    Speech(SpectrogramFeatures),
}

/// A tokenized training/eval example. `target_ids` carry no specials; BOS and
/// EOS are added when batches are built.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub sentence_id: String,
    pub source: SourceData,
    pub target_ids: Vec<u32>,
    pub target_text: String,
}

impl Example {
    pub fn source_len(&self) -> usize {
        match &self.source {
            SourceData::Text(ids) => ids.len(),
            SourceData::Speech(f) => f.n_frames(),
        }
    }
}

/// Tokenized examples of one translation direction.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Tokenizes manifest records; feature files load once per distinct path.
    pub fn from_records(
        records: &[&ManifestRecord],
        encoder: &mut CachedEncoder,
        base_dir: &Path,
    ) -> Result<Self> {
        let mut feature_cache: HashMap<String, SpectrogramFeatures> = HashMap::new();
        let mut examples = Vec::with_capacity(records.len());
        for r in records {
            let source = if r.is_speech() {
                let features = match feature_cache.get(&r.src) {
                    Some(f) => f.clone(),
                    None => {
                        let f = load_features(&base_dir.join(&r.src))?;
                        feature_cache.insert(r.src.clone(), f.clone());
                        f
                    }
                };
                SourceData::Speech(features)
            } else {
                SourceData::Text(encoder.encode(&r.src))
            };
            examples.push(Example {
                id: r.id.clone(),
                sentence_id: r.sentence_id().to_string(),
                source,
                target_ids: encoder.encode(&r.tgt),
                target_text: r.tgt.clone(),
            });
        }
        Ok(Dataset { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Padded subword-id matrix plus per-row lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<u32>,
    t_max: usize,
    lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let t_max = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD_ID; rows.len() * t_max];
        let mut lengths = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            ids[i * t_max..i * t_max + row.len()].copy_from_slice(row);
            lengths.push(row.len());
        }
        TokenBatch { ids, t_max, lengths }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Row `b` without padding.
    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.t_max..b * self.t_max + self.lengths[b]]
    }

    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Padded feature tensor `[B x T_max x n_mels]` plus per-utterance lengths.
#[derive(Clone, Debug)]
pub struct SpeechBatch {
    frames: Tensor<f32>,
    lengths: Vec<usize>,
}

impl SpeechBatch {
    pub fn from_features(utterances: &[&SpectrogramFeatures]) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::data("speech batch needs at least one utterance"));
        }
        let n_mels = utterances[0].n_mels();
        if utterances.iter().any(|f| f.n_mels() != n_mels) {
            return Err(Error::dim("speech batch mixes mel widths".to_string()));
        }
        let t_max = utterances.iter().map(|f| f.n_frames()).max().unwrap_or(0);
        let mut data = vec![0.0f32; utterances.len() * t_max * n_mels];
        let mut lengths = Vec::with_capacity(utterances.len());
        for (i, f) in utterances.iter().enumerate() {
            let src = f.frames().data();
            data[i * t_max * n_mels..i * t_max * n_mels + src.len()].copy_from_slice(src);
            lengths.push(f.n_frames());
        }
        Ok(SpeechBatch {
            frames: Tensor::new(vec![utterances.len(), t_max, n_mels], data)?,
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Utterance `b` without padding, `[T x n_mels]`.
    pub fn utterance(&self, b: usize) -> SpectrogramFeatures {
        let n_mels = self.frames.shape()[2];
        let t_max = self.frames.shape()[1];
        let len = self.lengths[b];
        let start = b * t_max * n_mels;
        let data = self.frames.data()[start..start + len * n_mels].to_vec();
        SpectrogramFeatures::new(Tensor::new(vec![len, n_mels], data).expect("shape matches"))
            .expect("padded batch rows came from valid features")
    }
}

#[derive(Clone, Debug)]
pub enum BatchSource {
    Text(TokenBatch),
    Speech(SpeechBatch),
}

/// One training batch. Target rows are `[BOS, ids..., EOS]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub example_ids: Vec<String>,
    pub source: BatchSource,
    pub targets: TokenBatch,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::data("cannot build an empty batch"));
        }
        let example_ids = examples.iter().map(|e| e.id.clone()).collect();
        let target_rows: Vec<Vec<u32>> = examples
            .iter()
            .map(|e| {
                let mut row = Vec::with_capacity(e.target_ids.len() + 2);
                row.push(BOS_ID);
                row.extend_from_slice(&e.target_ids);
                row.push(EOS_ID);
                row
            })
            .collect();
        let targets = TokenBatch::from_rows(&target_rows);

        let all_text = examples.iter().all(|e| matches!(e.source, SourceData::Text(_)));
        let all_speech = examples.iter().all(|e| matches!(e.source, SourceData::Speech(_)));
        let source = if all_text {
            let rows: Vec<Vec<u32>> = examples
                .iter()
                .map(|e| match &e.source {
                    SourceData::Text(ids) => ids.clone(),
                    SourceData::Speech(_) => unreachable!(),
                })
                .collect();
            BatchSource::Text(TokenBatch::from_rows(&rows))
        } else if all_speech {
            let feats: Vec<&SpectrogramFeatures> = examples
                .iter()
                .map(|e| match &e.source {
                    SourceData::Speech(f) => f,
                    SourceData::Text(_) => unreachable!(),
                })
                .collect();
            BatchSource::Speech(SpeechBatch::from_features(&feats)?)
        } else {
            return Err(Error::data("batch mixes text and speech sources"));
        };
        Ok(Batch { example_ids, source, targets })
    }

    pub fn batch_size(&self) -> usize {
        self.example_ids.len()
    }

    pub fn total_target_tokens(&self) -> usize {
        self.targets.total_tokens()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, src: &str, split: Split) -> ManifestRecord {
        ManifestRecord {
            id: id.to_string(),
            src_lang: "en".into(),
            tgt_lang: "de".into(),
            src: src.to_string(),
            tgt: "d1 d2".into(),
            split,
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let records = vec![record("a.en-de", "e1", Split::Train), record("a.en-de", "e2", Split::Train)];
        assert!(CorpusManifest::new(records).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = CorpusManifest::new(vec![
            record("a.en-de", "e1 e2", Split::Train),
            record("b.en_speech-de", "features/b.mbsf", Split::Test),
        ])
        .unwrap();
        let path = dir.path().join("manifest.tsv");
        manifest.save(&path).unwrap();
        let back = CorpusManifest::load(&path).unwrap();
        assert_eq!(manifest.records(), back.records());
        assert!(back.records()[1].is_speech());
        assert_eq!(back.records()[1].sentence_id(), "b");
    }

    #[test]
    fn token_batch_pads_and_slices() {
        let batch = TokenBatch::from_rows(&[vec![5, 6, 7], vec![8]]);
        assert_eq!(batch.t_max(), 3);
        assert_eq!(batch.row(0), &[5, 6, 7]);
        assert_eq!(batch.row(1), &[8]);
        assert_eq!(batch.total_tokens(), 4);
    }

    #[test]
    fn batch_targets_gain_bos_eos() {
        let examples = vec![Example {
            id: "x".into(),
            sentence_id: "x".into(),
            source: SourceData::Text(vec![9, 9]),
            target_ids: vec![4, 5],
            target_text: "d1 d2".into(),
        }];
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = Batch::from_examples(&refs).unwrap();
        assert_eq!(batch.targets.row(0), &[BOS_ID, 4, 5, EOS_ID]);
    }
}
