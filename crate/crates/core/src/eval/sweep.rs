//! Adapter projection-size sweep: one coupling per size at an equal step
//! budget and seed, against a no-adapter baseline reference line.

use std::fmt::Write as _;

use crate::adapter::{adapter_param_count, AdapterConfig};
use crate::corpus::{BpeModel, Dataset, SourceData};
use crate::error::Result;
use crate::eval::{bleu, decode_corpus};
use crate::registry::{ModuleKey, Registry};
use crate::training::{couple, TrainingConfig};

#[derive(Clone, Debug)]
pub struct AdapterSweepConfig {
    pub sizes: Vec<usize>,
    pub training: TrainingConfig,
    pub max_len: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// None is the no-adapter baseline row.
    pub d_proj: Option<usize>,
    pub adapter_params: u64,
    pub final_loss: f64,
    pub bleu: f64,
}

const FINAL_LOSS_WINDOW: usize = 20;

/// Couples a fresh copy of `base` once per projection size (plus once
/// without an adapter) and scores each on the given evaluation examples.
#[allow(clippy::too_many_arguments)]
pub fn adapter_sweep(
    base: &Registry,
    speech_key: &ModuleKey,
    tgt_key: &ModuleKey,
    dataset: &Dataset,
    eval_examples: &[(String, SourceData)],
    eval_references: &[String],
    bpe: &BpeModel,
    cfg: &AdapterSweepConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let d_model = base.get(speech_key)?.config.d_model();
    let mut rows = Vec::with_capacity(cfg.sizes.len() + 1);
    let mut variants: Vec<Option<usize>> = vec![None];
    variants.extend(cfg.sizes.iter().map(|&s| Some(s)));
    for variant in variants {
        let mut registry = base.clone();
        let adapter_cfg = variant.map(AdapterConfig::new);
        let outcome = couple(
            &mut registry,
            speech_key,
            tgt_key,
            dataset,
            adapter_cfg,
            &cfg.training,
            seed,
            false,
        )?;
        let path = registry.route(speech_key, tgt_key)?;
        let decoded = decode_corpus(&registry, &path, eval_examples, cfg.max_len, cfg.threads)?;
        let hypotheses: Vec<String> = decoded.iter().map(|(_, ids)| bpe.decode(ids)).collect();
        let score = bleu(&hypotheses, eval_references)?;
        rows.push(SweepRow {
            d_proj: variant,
            adapter_params: variant.map_or(0, |p| adapter_param_count(d_model, p)),
            final_loss: outcome.final_loss(FINAL_LOSS_WINDOW),
            bleu: score,
        });
    }
    Ok(rows)
}

/// CSV with one row per size plus the baseline reference row.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("d_proj,adapter_params,final_loss,bleu\n");
    for r in rows {
        let name = r.d_proj.map_or_else(|| "baseline".to_string(), |p| p.to_string());
        writeln!(s, "{},{},{:.6},{:.6}", name, r.adapter_params, r.final_loss, r.bleu)
            .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape_has_baseline_plus_sizes() {
        let rows = vec![
            SweepRow { d_proj: None, adapter_params: 0, final_loss: 0.5, bleu: 72.0 },
            SweepRow { d_proj: Some(8), adapter_params: 1232, final_loss: 0.4, bleu: 75.0 },
            SweepRow { d_proj: Some(16), adapter_params: 2256, final_loss: 0.35, bleu: 76.0 },
        ];
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "d_proj,adapter_params,final_loss,bleu");
        assert!(lines[1].starts_with("baseline,0,"));
        assert!(lines[2].starts_with("8,1232,"));
    }

    #[test]
    fn paper_scale_grid_includes_largest_sizes() {
        use crate::adapter::PAPER_SWEEP_SIZES;
        assert!(PAPER_SWEEP_SIZES.contains(&4096));
        assert!(PAPER_SWEEP_SIZES.contains(&9120));
    }
}
