use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Span, NO_RELATION};
use crate::encoder::HiddenStates;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Two instances whose entity pairs are compared, `i:j` in corpus order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalogyPair {
    pub i: String,
    pub j: String,
    pub polarity: Polarity,
}

pub fn polarity(a: &str, b: &str) -> Polarity {
    if a == b && a != NO_RELATION {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

/// Samples up to `max_per_polarity` pairs of each polarity, uniformly and
/// without replacement from all unordered instance pairs. The result lists
/// positives first, each polarity in corpus order.
pub fn build_analogy_pairs(corpus: &Corpus, max_per_polarity: usize, seed: u64) -> Result<Vec<AnalogyPair>> {
    if corpus.len() < 2 {
        return Err(Error::Empty("analogy pairs need at least two instances".into()));
    }
    let mut by_polarity: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    let inst = &corpus.instances;
    for a in 0..inst.len() {
        for b in a + 1..inst.len() {
            let k = polarity(&inst[a].relation, &inst[b].relation) as usize;
            by_polarity[k].push((a, b));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, all) in by_polarity.iter().enumerate() {
        let mut picked: Vec<usize> = if all.len() <= max_per_polarity {
            (0..all.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, all.len(), max_per_polarity).into_vec()
        };
        picked.sort_unstable();
        let pol = if k == 0 { Polarity::Positive } else { Polarity::Negative };
        out.extend(picked.into_iter().map(|p| AnalogyPair {
            i: inst[all[p].0].id.clone(),
            j: inst[all[p].1].id.clone(),
            polarity: pol,
        }));
    }
    Ok(out)
}

/// Mean of the span's token vectors, per layer: an `h×d` matrix.
pub fn slice_entity_embedding(hs: &HiddenStates, span: Span) -> Result<Tensor> {
    if span.is_empty() {
        return Err(Error::Empty("entity span is empty".into()));
    }
    if span.end >= hs.len() {
        return Err(Error::Index(format!("span {}..={} outside {} tokens", span.start, span.end, hs.len())));
    }
    let (h, d) = (hs.depth(), hs.dim());
    let mut out = vec![0.0; h * d];
    let scale = 1.0 / span.len() as f64;
    for l in 0..h {
        let row = &mut out[l * d..(l + 1) * d];
        for t in span.start..=span.end {
            for (o, v) in row.iter_mut().zip(hs.vector(l, t)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o *= scale);
    }
    Tensor::new(vec![h, d], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    /// Cosine of a zero vector is taken as 0.
    pub fn apply(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                let n = (aa * bb).sqrt();
                if n == 0.0 {
                    0.0
                } else {
                    (ab / n).clamp(-1.0, 1.0)
                }
            }
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::config(format!("unknown metric {other:?}"))),
        }
    }
}

pub const CATEGORIES: [&str; 4] = ["heads_pos", "heads_neg", "tails_pos", "tails_neg"];

/// Mean pair metric per layer (rows) and category (columns, in
/// [`CATEGORIES`] order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMatrix {
    pub metric: Metric,
    pub tag: String,
    pub values: Vec<[f64; 4]>,
}

impl CategoryMatrix {
    pub fn layers(&self) -> usize {
        self.values.len()
    }

    /// Heads+ minus Heads- at `layer`.
    pub fn head_gap(&self, layer: usize) -> f64 {
        self.values[layer][0] - self.values[layer][1]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(std::iter::once("layer").chain(CATEGORIES))?;
        for (l, row) in self.values.iter().enumerate() {
            let mut rec = vec![l.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, metric: Metric, tag: &str) -> Result<Self> {
        let name = path.display().to_string();
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != ["layer", "heads_pos", "heads_neg", "tails_pos", "tails_neg"] {
            return Err(Error::Parse {
                source_name: name,
                record: 0,
                message: format!("unexpected header {header:?}"),
            });
        }
        let mut values = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |m: String| Error::Parse { source_name: name.clone(), record: i + 1, message: m };
            if rec.get(0) != Some(i.to_string().as_str()) {
                return Err(bad(format!("expected layer {i}")));
            }
            let mut row = [0.0; 4];
            for (k, cell) in row.iter_mut().enumerate() {
                let s = rec.get(k + 1).ok_or_else(|| bad("missing column".into()))?;
                *cell = s.parse().map_err(|_| bad(format!("bad number {s:?}")))?;
            }
            values.push(row);
        }
        Ok(Self { metric, tag: tag.to_string(), values })
    }
}

/// Head and tail embeddings (`h×d` each) of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityEmbeddings {
    pub head: Tensor,
    pub tail: Tensor,
}

/// Per-layer category means from precomputed embeddings.
pub fn category_matrix_from(
    embeddings: &BTreeMap<String, EntityEmbeddings>,
    pairs: &[AnalogyPair],
    metric: Metric,
    tag: &str,
) -> Result<CategoryMatrix> {
    let counts = [Polarity::Positive, Polarity::Negative].map(|p| pairs.iter().filter(|x| x.polarity == p).count());
    if counts.contains(&0) {
        return Err(Error::Empty(
            "category matrix needs positive and negative pairs (fewer than two relations?)".into(),
        ));
    }
    let lookup =
        |id: &str| embeddings.get(id).ok_or_else(|| Error::NotFound(format!("no embeddings for instance {id:?}")));
    let first = lookup(&pairs[0].i)?;
    let (h, d) = (first.head.rows(), first.head.cols());
    let mut sums = vec![[0.0; 4]; h];
    for pair in pairs {
        let (a, b) = (lookup(&pair.i)?, lookup(&pair.j)?);
        if a.head.rows() != h || b.head.rows() != h || a.head.cols() != d || b.head.cols() != d {
            return Err(Error::dim("entity embeddings differ in shape"));
        }
        let col = pair.polarity as usize;
        for (l, s) in sums.iter_mut().enumerate() {
            s[col] += metric.apply(a.head.row(l), b.head.row(l));
            s[2 + col] += metric.apply(a.tail.row(l), b.tail.row(l));
        }
    }
    let values = sums.into_iter().map(|s| [0, 1, 2, 3].map(|k| s[k] / counts[k % 2] as f64)).collect();
    Ok(CategoryMatrix { metric, tag: tag.to_string(), values })
}

/// Embeds every instance referenced by `pairs` under the model's sentence
/// config, pooling the entity surface tokens.
pub fn entity_embeddings(
    model: &Model,
    corpus: &Corpus,
    pairs: &[AnalogyPair],
) -> Result<BTreeMap<String, EntityEmbeddings>> {
    let mut wanted: Vec<&str> = pairs.iter().flat_map(|p| [p.i.as_str(), p.j.as_str()]).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let index: BTreeMap<&str, usize> = corpus.instances.iter().enumerate().map(|(k, i)| (i.id.as_str(), k)).collect();
    wanted
        .par_iter()
        .map(|id| {
            let k = *index.get(id).ok_or_else(|| Error::NotFound(format!("instance {id:?} is not in the corpus")))?;
            let p = model.prepare_unlabeled(&corpus.instances[k])?;
            let hs = model.hidden_states(&p)?;
            Ok((
                id.to_string(),
                EntityEmbeddings {
                    head: slice_entity_embedding(&hs, p.subj_core)?,
                    tail: slice_entity_embedding(&hs, p.obj_core)?,
                },
            ))
        })
        .collect()
}

pub fn category_matrix(
    model: &Model,
    corpus: &Corpus,
    pairs: &[AnalogyPair],
    metric: Metric,
    tag: &str,
) -> Result<CategoryMatrix> {
    category_matrix_from(&entity_embeddings(model, corpus, pairs)?, pairs, metric, tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{REInstance, Split};
    use crate::encoder::HiddenSourceTag;

    fn inst(id: &str, relation: &str) -> REInstance {
        REInstance {
            id: id.into(),
            tokens: vec!["a".into(), "x".into(), "b".into()],
            subj_span: Span::new(0, 0),
            obj_span: Span::new(2, 2),
            subj_type: "T".into(),
            obj_type: "T".into(),
            relation: relation.into(),
        }
    }

    fn corpus(rels: &[&str]) -> Corpus {
        let inst = rels.iter().enumerate().map(|(k, r)| inst(&format!("i{k}"), r)).collect();
        Corpus::new(inst, Split::Test).unwrap()
    }

    #[test]
    fn pair_polarity_and_caps() {
        let same = build_analogy_pairs(&corpus(&["r", "r"]), 10, 0).unwrap();
        assert_eq!(same, vec![AnalogyPair { i: "i0".into(), j: "i1".into(), polarity: Polarity::Positive }]);
        let diff = build_analogy_pairs(&corpus(&["r", "s"]), 10, 0).unwrap();
        assert_eq!(diff[0].polarity, Polarity::Negative);
        let none = build_analogy_pairs(&corpus(&[NO_RELATION, NO_RELATION]), 10, 0).unwrap();
        assert_eq!(none[0].polarity, Polarity::Negative);
        // Five "r" instances admit 10 positive pairs.
        let c = corpus(&["r", "r", "r", "r", "r", "s"]);
        let all = build_analogy_pairs(&c, 100, 0).unwrap();
        assert_eq!(all.iter().filter(|p| p.polarity == Polarity::Positive).count(), 10);
        let capped = build_analogy_pairs(&c, 3, 4).unwrap();
        assert_eq!(capped.iter().filter(|p| p.polarity == Polarity::Positive).count(), 3);
        assert_eq!(capped, build_analogy_pairs(&c, 3, 4).unwrap());
        assert!(capped.iter().all(|p| all.contains(p)));
        assert!(build_analogy_pairs(&corpus(&["r"]), 3, 0).is_err());
    }

    fn states(vectors: &[[f64; 2]], depth: usize) -> HiddenStates {
        let mut data = Vec::new();
        for l in 0..depth {
            for v in vectors {
                data.extend(v.iter().map(|x| x * (l + 1) as f64));
            }
        }
        HiddenStates::new(Tensor::new(vec![depth, vectors.len(), 2], data).unwrap(), vec![], HiddenSourceTag::Toy)
            .unwrap()
    }

    #[test]
    fn slicing_means_per_layer() {
        let hs = states(&[[1.0, 2.0], [3.0, -4.0], [3.0, -4.0]], 2);
        assert_eq!(slice_entity_embedding(&hs, Span::new(0, 0)).unwrap().data(), &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(slice_entity_embedding(&hs, Span::new(1, 2)).unwrap().data(), &[3.0, -4.0, 6.0, -8.0]);
        let m = slice_entity_embedding(&hs, Span::new(0, 1)).unwrap();
        for l in 0..2 {
            for k in 0..2 {
                let oracle = (hs.vector(l, 0)[k] + hs.vector(l, 1)[k]) / 2.0;
                assert_eq!(m.row(l)[k], oracle);
            }
        }
        assert!(slice_entity_embedding(&hs, Span::new(2, 3)).is_err());
        assert!(slice_entity_embedding(&hs, Span::new(2, 1)).is_err());
    }

    #[test]
    fn metric_basics() {
        let (a, b) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(Metric::Cosine.apply(&a, &a), 1.0);
        assert_eq!(Metric::Euclidean.apply(&a, &a), 0.0);
        assert_eq!(Metric::Cosine.apply(&a, &b), 0.0);
        assert_eq!(Metric::Euclidean.apply(&a, &b), 2f64.sqrt());
    }

    fn emb(head: [f64; 4], tail: [f64; 4]) -> EntityEmbeddings {
        EntityEmbeddings {
            head: Tensor::new(vec![2, 2], head.to_vec()).unwrap(),
            tail: Tensor::new(vec![2, 2], tail.to_vec()).unwrap(),
        }
    }

    #[test]
    fn two_pair_fixture_matches_scalar_oracle() {
        let mut e = BTreeMap::new();
        e.insert("a".to_string(), emb([1.0, 2.0, 0.5, -1.0], [0.0, 1.0, 2.0, 2.0]));
        e.insert("b".to_string(), emb([2.0, 1.0, -0.5, 3.0], [1.0, 1.0, -2.0, 0.5]));
        e.insert("c".to_string(), emb([0.3, -0.7, 1.5, 1.5], [4.0, 0.0, 0.1, 0.2]));
        let pairs = vec![
            AnalogyPair { i: "a".into(), j: "b".into(), polarity: Polarity::Positive },
            AnalogyPair { i: "b".into(), j: "c".into(), polarity: Polarity::Negative },
        ];
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let m = category_matrix_from(&e, &pairs, metric, "t").unwrap();
            for l in 0..2 {
                let scalar = |x: &Tensor, y: &Tensor| {
                    let (x0, x1, y0, y1) = (x.row(l)[0], x.row(l)[1], y.row(l)[0], y.row(l)[1]);
                    match metric {
                        Metric::Cosine => {
                            (x0 * y0 + x1 * y1) / ((x0 * x0 + x1 * x1).sqrt() * (y0 * y0 + y1 * y1).sqrt())
                        }
                        Metric::Euclidean => ((x0 - y0).powi(2) + (x1 - y1).powi(2)).sqrt(),
                    }
                };
                let oracle = [
                    scalar(&e["a"].head, &e["b"].head),
                    scalar(&e["b"].head, &e["c"].head),
                    scalar(&e["a"].tail, &e["b"].tail),
                    scalar(&e["b"].tail, &e["c"].tail),
                ];
                for k in 0..4 {
                    assert!((m.values[l][k] - oracle[k]).abs() < 1e-12);
                }
            }
            // Pair order and pair-list order do not matter.
            let swapped: Vec<_> = pairs
                .iter()
                .rev()
                .map(|p| AnalogyPair { i: p.j.clone(), j: p.i.clone(), polarity: p.polarity })
                .collect();
            let m2 = category_matrix_from(&e, &swapped, metric, "t").unwrap();
            for (r1, r2) in m.values.iter().zip(&m2.values) {
                for k in 0..4 {
                    assert!((r1[k] - r2[k]).abs() < 1e-15);
                }
            }
        }
        assert!(category_matrix_from(&e, &pairs[..1], Metric::Cosine, "t").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = CategoryMatrix {
            metric: Metric::Cosine,
            tag: "before".into(),
            values: vec![[0.1, -0.25, 1.0 / 3.0, 0.0], [1.0, 0.5, 0.25, -1.0]],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("layer,heads_pos,heads_neg,tails_pos,tails_neg\n0,"));
        assert_eq!(CategoryMatrix::read_csv(&path, Metric::Cosine, "before").unwrap(), m);
    }
}
