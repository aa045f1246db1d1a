use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// One relabeled instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub id: String,
    pub old: String,
    pub new: String,
}

/// Relabels exactly `⌊rate·N⌋` uniformly chosen instances, each with a
/// label drawn uniformly from the corpus label set minus its current one.
/// The returned log is in corpus order.
pub fn inject_label_noise(corpus: &Corpus, rate: f64, seed: u64) -> Result<(Corpus, Vec<Flip>)> {
    if !(0.0..0.5).contains(&rate) {
        return Err(Error::config(format!("noise rate {rate} outside [0, 0.5)")));
    }
    let n = corpus.len();
    let k = (rate * n as f64).floor() as usize;
    if k > 0 && corpus.relations.len() < 2 {
        return Err(Error::config("label noise needs at least two labels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut out = corpus.clone();
    let mut log = Vec::with_capacity(k);
    for i in chosen {
        let inst = &mut out.instances[i];
        let others: Vec<&String> = corpus.relations.iter().filter(|r| **r != inst.relation).collect();
        let new = others[rng.random_range(0..others.len())].clone();
        log.push(Flip { id: inst.id.clone(), old: std::mem::replace(&mut inst.relation, new.clone()), new });
    }
    Ok((out, log))
}
