use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::predicted_index;
use super::{score, Metrics, Model};
use crate::data::{Corpus, REInstance};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Graph};

/// Credit a routing head's input capsules hand to each of its outputs,
/// summed over inputs (for H1: positive then negative feature).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadCredit {
    pub head: String,
    pub output_credit: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: String,
    pub pred: String,
    pub logits: Vec<f64>,
    /// The decoder's own relation choice when it shares the model with routing heads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_pred: Option<String>,
    #[serde(default)]
    pub credits: Vec<HeadCredit>,
}

fn predict_one(model: &Model, inst: &REInstance) -> Result<PredictionRecord> {
    let p = model.prepare_unlabeled(inst)?;
    let mut g = Graph::with_params(&model.store);
    let r = model.record(&mut g, &p)?;
    let logits = g.value(r.logits);
    let decoder_pred = match r.decoder_logits {
        Some(d) if d != r.logits => Some(model.relations[predicted_index(g.value(d))].clone()),
        _ => None,
    };
    let credits = r
        .credits
        .iter()
        .map(|&(kind, s1, s2)| {
            let composed = matmul(g.value(s1), g.value(s2))?;
            let mut sums = vec![0.0; composed.cols()];
            for i in 0..composed.rows() {
                for (s, c) in sums.iter_mut().zip(composed.row(i)) {
                    *s += c;
                }
            }
            Ok(HeadCredit { head: kind.name().to_string(), output_credit: sums })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionRecord {
        id: inst.id.clone(),
        gold: inst.relation.clone(),
        pred: model.relations[predicted_index(logits)].clone(),
        logits: logits.data().to_vec(),
        decoder_pred,
        credits,
    })
}

/// Predicts every instance (in parallel, results in corpus order) and scores them.
pub fn evaluate(model: &Model, corpus: &Corpus) -> Result<(Metrics, Vec<PredictionRecord>)> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus has no instances".into()));
    }
    let records: Vec<PredictionRecord> =
        corpus.instances.par_iter().map(|i| predict_one(model, i)).collect::<Result<_>>()?;
    let metrics = score(records.iter().map(|r| (r.gold.as_str(), r.pred.as_str())));
    Ok((metrics, records))
}

/// CSV with header `id,gold,pred`.
pub fn write_predictions_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "gold", "pred"])?;
    for r in records {
        w.write_record([&r.id, &r.gold, &r.pred])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions_jsonl(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
