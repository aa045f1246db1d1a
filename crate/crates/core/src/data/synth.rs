//! Seeded template corpora with typed entities.
//!
//! Every sentence has the shape `SUBJ middle… OBJ tail… .` where the middle
//! and tail are drawn from a small filler vocabulary plus class cue words.
//! Relations are named `rel_<k>`, entity types `type<k>`; cue words and
//! entity surfaces are pronounceable pseudo-words, unique per corpus.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{inject_label_noise, Corpus, Flip, REInstance, Span, Split, NO_RELATION};
use crate::error::{Error, Result};

const FILLERS: [&str; 20] = [
    "the", "a", "of", "to", "in", "was", "with", "at", "by", "on", "for", "and", "said", "that", "from", "after",
    "near", "has", "had", "is",
];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const CUES_PER_CLASS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_relations: usize,
    pub n_entity_types: usize,
    /// Fraction of each split labeled `no_relation`.
    pub negative_ratio: f64,
    pub templates_per_relation: usize,
    /// Give every relation its own (subject type, object type) pair, with
    /// negatives drawn from at most `n_relations` of the unused pairs.
    pub type_determines_relation: bool,
    pub noise_rate: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_test: usize,
    pub surfaces_per_type: usize,
    /// When nonzero, each relation draws its subjects and objects from its
    /// own pools of this many surfaces (whatever their types), and negatives
    /// draw from the union of those pools. Zero uses the per-type pools.
    pub surfaces_per_relation: usize,
    /// Draw every entity from one shared surface pool instead of per-type pools.
    pub ambiguous_surfaces: bool,
    /// Give each class its own templates and cue words; otherwise all classes
    /// share one template pool.
    pub informative_templates: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_relations: 8,
            n_entity_types: 8,
            negative_ratio: 0.3,
            templates_per_relation: 3,
            type_determines_relation: false,
            noise_rate: 0.0,
            seed: 7,
            n_train: 500,
            n_eval: 0,
            n_test: 200,
            surfaces_per_type: 20,
            surfaces_per_relation: 10,
            ambiguous_surfaces: false,
            informative_templates: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_relations < 2 {
            return Err(Error::config("at least 2 relations are required"));
        }
        if self.n_entity_types == 0 || self.templates_per_relation == 0 || self.surfaces_per_type == 0 {
            return Err(Error::config("entity types, templates and surfaces must be positive"));
        }
        if !(0.0..1.0).contains(&self.negative_ratio) {
            return Err(Error::config(format!("negative_ratio {} outside [0, 1)", self.negative_ratio)));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::config(format!("noise_rate {} outside [0, 0.5)", self.noise_rate)));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train must be positive"));
        }
        if self.type_determines_relation {
            let pairs = self.n_entity_types * self.n_entity_types;
            let needed = self.n_relations + usize::from(self.negative_ratio > 0.0);
            if pairs < needed {
                return Err(Error::config(format!(
                    "{} entity types give {pairs} type pairs, {needed} needed for unique relation types",
                    self.n_entity_types
                )));
            }
        }
        Ok(())
    }

    pub fn relation_names(&self) -> Vec<String> {
        (0..self.n_relations).map(|k| format!("rel_{k}")).collect()
    }

    pub fn type_names(&self) -> Vec<String> {
        (0..self.n_entity_types).map(|k| format!("type{k}")).collect()
    }

    /// Label set shared by every split.
    pub fn labels(&self) -> Vec<String> {
        let mut labels = self.relation_names();
        if self.negative_ratio > 0.0 {
            labels.push(NO_RELATION.into());
        }
        labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Corpus,
    pub eval: Corpus,
    pub test: Corpus,
    /// Label flips applied across all splits, in split then corpus order.
    pub flips: Vec<Flip>,
}

impl SynthCorpus {
    pub fn split(&self, split: Split) -> &Corpus {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Subj,
    Obj,
    Word(String),
}

struct WordMaker {
    used: HashSet<String>,
}

impl WordMaker {
    fn new() -> Self {
        Self { used: FILLERS.iter().map(|s| s.to_string()).collect() }
    }

    fn make(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let mut w = String::with_capacity(6);
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn filler(rng: &mut ChaCha8Rng) -> Slot {
    Slot::Word(FILLERS[rng.random_range(0..FILLERS.len())].to_string())
}

fn template(rng: &mut ChaCha8Rng, cues: &[String]) -> Vec<Slot> {
    let middle_len = rng.random_range(3..=6);
    let mut middle: Vec<Slot> = (0..middle_len).map(|_| filler(rng)).collect();
    let n_cues = rng.random_range(1..=cues.len().min(2));
    for _ in 0..n_cues {
        let at = rng.random_range(0..middle.len());
        middle[at] = Slot::Word(cues[rng.random_range(0..cues.len())].clone());
    }
    let tail_len = rng.random_range(0..=2);
    let mut t = vec![Slot::Subj];
    t.extend(middle);
    t.push(Slot::Obj);
    t.extend((0..tail_len).map(|_| filler(rng)));
    t.push(Slot::Word(".".into()));
    t
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    types: Vec<String>,
    /// Per class (relations then negative), the templates it may use.
    templates: Vec<Vec<Vec<Slot>>>,
    /// Surface pool per type index.
    surfaces: Vec<Vec<String>>,
    /// Subject and object pools per relation, when enabled.
    relation_surfaces: Vec<[Vec<String>; 2]>,
    /// Type pair per relation, and the pairs left for negatives.
    relation_pairs: Vec<(usize, usize)>,
    negative_pairs: Vec<(usize, usize)>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut words = WordMaker::new();
        let n_classes = spec.n_relations + 1;
        let cues: Vec<Vec<String>> =
            (0..n_classes).map(|_| (0..CUES_PER_CLASS).map(|_| words.make(rng)).collect()).collect();
        let templates = if spec.informative_templates {
            cues.iter().map(|c| (0..spec.templates_per_relation).map(|_| template(rng, c)).collect()).collect()
        } else {
            let shared_cues = cues.concat();
            let pool: Vec<Vec<Slot>> =
                (0..spec.templates_per_relation * n_classes).map(|_| template(rng, &shared_cues)).collect();
            vec![pool; n_classes]
        };
        let surfaces = if spec.ambiguous_surfaces {
            let pool: Vec<String> =
                (0..spec.surfaces_per_type * spec.n_entity_types).map(|_| words.make(rng)).collect();
            vec![pool; spec.n_entity_types]
        } else {
            (0..spec.n_entity_types).map(|_| (0..spec.surfaces_per_type).map(|_| words.make(rng)).collect()).collect()
        };
        let relation_surfaces = if spec.surfaces_per_relation > 0 && !spec.ambiguous_surfaces {
            (0..spec.n_relations)
                .map(|_| [(); 2].map(|_| (0..spec.surfaces_per_relation).map(|_| words.make(rng)).collect()))
                .collect()
        } else {
            Vec::new()
        };
        let (relation_pairs, negative_pairs) = if spec.type_determines_relation {
            let mut pairs: Vec<(usize, usize)> =
                (0..spec.n_entity_types).flat_map(|a| (0..spec.n_entity_types).map(move |b| (a, b))).collect();
            pairs.shuffle(rng);
            let mut rest = pairs.split_off(spec.n_relations);
            // Few enough negative pairs that each is seen during training.
            rest.truncate(spec.n_relations);
            (pairs, rest)
        } else {
            (Vec::new(), Vec::new())
        };
        Self { spec, types: spec.type_names(), templates, surfaces, relation_surfaces, relation_pairs, negative_pairs }
    }

    fn surface(&self, class: usize, role: usize, ty: usize, rng: &mut ChaCha8Rng) -> String {
        let pool = if self.relation_surfaces.is_empty() {
            &self.surfaces[ty]
        } else if class < self.spec.n_relations {
            &self.relation_surfaces[class][role]
        } else {
            &self.relation_surfaces[rng.random_range(0..self.spec.n_relations)][role]
        };
        pool[rng.random_range(0..pool.len())].clone()
    }

    /// `class` is a relation index, or `n_relations` for a negative.
    fn instance(&self, class: usize, rng: &mut ChaCha8Rng) -> REInstance {
        let spec = self.spec;
        let negative = class == spec.n_relations;
        let (st, ot) = if spec.type_determines_relation {
            if negative {
                self.negative_pairs[rng.random_range(0..self.negative_pairs.len())]
            } else {
                self.relation_pairs[class]
            }
        } else {
            (rng.random_range(0..spec.n_entity_types), rng.random_range(0..spec.n_entity_types))
        };
        let subj = self.surface(class, 0, st, rng);
        let obj = loop {
            let o = self.surface(class, 1, ot, rng);
            if o != subj || (self.relation_surfaces.is_empty() && self.surfaces[ot].len() == 1) {
                break o;
            }
        };
        let options = &self.templates[class];
        let tpl = &options[rng.random_range(0..options.len())];
        let mut tokens = Vec::with_capacity(tpl.len());
        let (mut subj_at, mut obj_at) = (0, 0);
        for slot in tpl {
            match slot {
                Slot::Subj => {
                    subj_at = tokens.len();
                    tokens.push(subj.clone());
                }
                Slot::Obj => {
                    obj_at = tokens.len();
                    tokens.push(obj.clone());
                }
                Slot::Word(w) => tokens.push(w.clone()),
            }
        }
        REInstance {
            id: String::new(),
            tokens,
            subj_span: Span::new(subj_at, subj_at),
            obj_span: Span::new(obj_at, obj_at),
            subj_type: self.types[st].clone(),
            obj_type: self.types[ot].clone(),
            relation: if negative { NO_RELATION.into() } else { format!("rel_{class}") },
        }
    }

    fn split(&self, split: Split, n: usize, rng: &mut ChaCha8Rng) -> Result<Corpus> {
        let n_neg = (self.spec.negative_ratio * n as f64).round() as usize;
        let mut instances: Vec<REInstance> = (0..n)
            .map(|i| {
                let class = if i < n - n_neg { i % self.spec.n_relations } else { self.spec.n_relations };
                self.instance(class, rng)
            })
            .collect();
        instances.shuffle(rng);
        for (i, inst) in instances.iter_mut().enumerate() {
            inst.id = format!("{}-{i:05}", split.name());
        }
        Corpus::with_relations(instances, self.spec.labels(), split)
    }
}

/// Builds train/eval/test splits, applying label noise when requested.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let generator = Generator::new(spec, &mut rng);
    let mut splits = Vec::with_capacity(3);
    let mut flips = Vec::new();
    for (k, (split, n)) in
        [(Split::Train, spec.n_train), (Split::Eval, spec.n_eval), (Split::Test, spec.n_test)].into_iter().enumerate()
    {
        let clean = generator.split(split, n, &mut rng)?;
        if spec.noise_rate > 0.0 {
            let (noisy, log) = inject_label_noise(&clean, spec.noise_rate, spec.seed.wrapping_add(1 + k as u64))?;
            flips.extend(log);
            splits.push(noisy);
        } else {
            splits.push(clean);
        }
    }
    let test = splits.pop().expect("three splits");
    let eval = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SynthCorpus { train, eval, test, flips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset_stats;
    use std::collections::HashMap;

    #[test]
    fn no_negatives_when_ratio_is_zero() {
        let spec = SynthSpec { n_relations: 2, negative_ratio: 0.0, n_train: 50, n_test: 10, ..SynthSpec::default() };
        let c = generate_synthetic(&spec).unwrap();
        assert!(c.train.instances.iter().chain(&c.test.instances).all(|i| !i.is_negative()));
        assert_eq!(c.train.relations, ["rel_0", "rel_1"]);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec };
        assert_ne!(generate_synthetic(&other).unwrap().train, generate_synthetic(&SynthSpec::default()).unwrap().train);
    }

    #[test]
    fn stats_follow_the_spec() {
        let spec =
            SynthSpec { n_relations: 5, n_entity_types: 4, negative_ratio: 0.5, n_train: 200, ..SynthSpec::default() };
        let c = generate_synthetic(&spec).unwrap();
        let s = dataset_stats(&c.train).unwrap();
        assert_eq!((s.n_relations, s.n_entity_types, s.size), (5, 4, 200));
        assert_eq!(s.negative_fraction, 0.5);
    }

    #[test]
    fn type_pairs_determine_the_relation() {
        let spec = SynthSpec { type_determines_relation: true, ..SynthSpec::default() };
        let c = generate_synthetic(&spec).unwrap();
        // Lookup table learned from train must classify test perfectly,
        // with unseen pairs defaulting to the negative label.
        let mut table: HashMap<(&str, &str), &str> = HashMap::new();
        for i in &c.train.instances {
            let prev = table.insert((&i.subj_type, &i.obj_type), &i.relation);
            assert!(prev.is_none_or(|p| p == i.relation));
        }
        for i in &c.test.instances {
            let pred = table.get(&(i.subj_type.as_str(), i.obj_type.as_str())).copied();
            assert_eq!(pred.unwrap_or(NO_RELATION), i.relation);
        }
    }

    #[test]
    fn too_few_type_pairs_is_rejected() {
        let spec =
            SynthSpec { n_entity_types: 2, n_relations: 4, type_determines_relation: true, ..SynthSpec::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn noise_flips_are_logged() {
        let spec = SynthSpec { noise_rate: 0.1, ..SynthSpec::default() };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.flips.len(), 50 + 20);
        assert!(c.flips.iter().any(|f| f.id.starts_with("test-")));
    }

    #[test]
    fn relation_pools_keep_surfaces_apart() {
        let c = generate_synthetic(&SynthSpec::default()).unwrap();
        let mut owner: HashMap<&str, &str> = HashMap::new();
        let mut pools: HashMap<&str, HashSet<&str>> = HashMap::new();
        for i in c.train.instances.iter().filter(|i| !i.is_negative()) {
            for w in [&i.tokens[i.subj_span.start], &i.tokens[i.obj_span.start]] {
                assert_eq!(*owner.entry(w).or_insert(&i.relation), i.relation);
            }
            pools.entry(&i.relation).or_default().insert(&i.tokens[i.subj_span.start]);
        }
        assert!(pools.values().all(|p| p.len() <= 10));
    }

    #[test]
    fn every_relation_appears_in_train() {
        let c = generate_synthetic(&SynthSpec::default()).unwrap();
        let seen: HashSet<&str> = c.train.instances.iter().map(|i| i.relation.as_str()).collect();
        assert_eq!(seen.len(), 9);
    }
}
