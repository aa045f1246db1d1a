//! Probing entity representations across layers, routing-credit summaries,
//! and mining prediction disagreements for label noise.

mod heatmap;
mod mining;
mod probe;

pub use heatmap::{heatmap_pixels, hot, ramp_positions, render_heatmap, write_ppm, CELL};
pub use mining::{
    mine_disagreements, noise_recovery_report, sample_category, sample_records, write_disagreements_csv,
    write_samples_jsonl, DisagreementCategory, NoiseRecovery, SampleRecord,
};
pub use probe::{
    build_analogy_pairs, category_matrix, category_matrix_from, entity_embeddings, polarity, slice_entity_embedding,
    AnalogyPair, CategoryMatrix, EntityEmbeddings, Metric, Polarity, CATEGORIES,
};

use serde::{Deserialize, Serialize};

use crate::model::PredictionRecord;

/// Mean credit each output capsule of one head receives, over records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreditSummary {
    pub head: String,
    pub records: usize,
    pub mean_output_credit: Vec<f64>,
}

pub fn summarize_credits(records: &[PredictionRecord]) -> Vec<CreditSummary> {
    let mut out: Vec<CreditSummary> = Vec::new();
    for r in records {
        for c in &r.credits {
            let idx = match out.iter().position(|s| s.head == c.head) {
                Some(i) => i,
                None => {
                    out.push(CreditSummary {
                        head: c.head.clone(),
                        records: 0,
                        mean_output_credit: vec![0.0; c.output_credit.len()],
                    });
                    out.len() - 1
                }
            };
            let s = &mut out[idx];
            s.records += 1;
            for (m, v) in s.mean_output_credit.iter_mut().zip(&c.output_credit) {
                *m += v;
            }
        }
    }
    for s in &mut out {
        let n = s.records as f64;
        s.mean_output_credit.iter_mut().for_each(|m| *m /= n);
    }
    out
}
