use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{render, Corpus, Flip, SentenceConfigKind};
use crate::error::{Error, Result};
use crate::model::PredictionRecord;

/// Records whose prediction disagrees with the gold label in one way.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisagreementCategory {
    pub gold: String,
    pub pred: String,
    pub count: usize,
    /// Member ids in record order.
    pub members: Vec<String>,
}

/// Buckets mispredictions by (gold, pred), largest first, ties by label.
pub fn mine_disagreements(records: &[PredictionRecord]) -> Vec<DisagreementCategory> {
    let mut buckets: BTreeMap<(&str, &str), Vec<String>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.gold != r.pred) {
        buckets.entry((&r.gold, &r.pred)).or_default().push(r.id.clone());
    }
    let mut out: Vec<DisagreementCategory> = buckets
        .into_iter()
        .map(|((gold, pred), members)| DisagreementCategory {
            gold: gold.to_string(),
            pred: pred.to_string(),
            count: members.len(),
            members,
        })
        .collect();
    out.sort_by_key(|c| std::cmp::Reverse(c.count));
    out
}

/// Up to `k` member ids, uniformly without replacement, in member order.
pub fn sample_category(category: &DisagreementCategory, k: usize, seed: u64) -> Vec<String> {
    let n = category.members.len();
    if n <= k {
        return category.members.clone();
    }
    let mut idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| category.members[i].clone()).collect()
}

/// CSV with header `gold,pred,count`.
pub fn write_disagreements_csv(path: &Path, categories: &[DisagreementCategory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gold", "pred", "count"])?;
    for c in categories {
        w.write_record([c.gold.as_str(), c.pred.as_str(), &c.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub gold: String,
    pub pred: String,
    pub id: String,
    pub text: String,
}

/// Samples `k` ids per category (seeded by `seed + rank`) and renders them.
pub fn sample_records(
    categories: &[DisagreementCategory],
    corpus: &Corpus,
    sentence: SentenceConfigKind,
    k: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let index: BTreeMap<&str, usize> = corpus.instances.iter().enumerate().map(|(k, i)| (i.id.as_str(), k)).collect();
    let mut out = Vec::new();
    for (rank, c) in categories.iter().enumerate() {
        for id in sample_category(c, k, seed.wrapping_add(rank as u64)) {
            let inst = index
                .get(id.as_str())
                .map(|&k| &corpus.instances[k])
                .ok_or_else(|| Error::NotFound(format!("instance {id:?} is not in the corpus")))?;
            out.push(SampleRecord {
                gold: c.gold.clone(),
                pred: c.pred.clone(),
                id,
                text: render(inst, sentence).text(),
            });
        }
    }
    Ok(out)
}

pub fn write_samples_jsonl(path: &Path, samples: &[SampleRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// How well the disagreement set picks out known label flips. Ratios with
/// an empty denominator are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecovery {
    pub flips: usize,
    pub disagreements: usize,
    pub recovered: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn noise_recovery_report(categories: &[DisagreementCategory], flips: &[Flip]) -> NoiseRecovery {
    let flagged: BTreeSet<&str> = categories.iter().flat_map(|c| c.members.iter().map(String::as_str)).collect();
    let flipped: BTreeSet<&str> = flips.iter().map(|f| f.id.as_str()).collect();
    let recovered = flagged.intersection(&flipped).count();
    let ratio = |d: usize| (d > 0).then(|| recovered as f64 / d as f64);
    NoiseRecovery {
        flips: flipped.len(),
        disagreements: flagged.len(),
        recovered,
        precision: ratio(flagged.len()),
        recall: ratio(flipped.len()),
    }
}
