//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. `CAPREL_ACCEPTANCE=1,4,9` restricts the run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use caprel::analysis::{
    build_analogy_pairs, category_matrix, mine_disagreements, noise_recovery_report, CategoryMatrix, Metric,
};
use caprel::data::{generate_synthetic, Corpus, SentenceConfigKind, SynthCorpus, SynthSpec};
use caprel::encoder::{EncoderConfig, HiddenSourceTag, HiddenStates};
use caprel::model::{evaluate, score, train, DecoderHeadConfig, Model, ModelConfig, TrainConfig};
use caprel::routing::{
    head_on_graph, route_traced, CapsuleSequence, HeadConfig, HeadKind, RoutingHead, RoutingParams, RoutingSpec,
};
use caprel::tensor::{grad_check_params, GradCheckOptions, ParamStore, Tensor};
use common::{max_abs_diff, oracle_route, routing_fixture, rows, small_fixture};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (usize, &'static str, Box<dyn FnMut(&mut Shared) -> Check>);
/// Gold/pred pairs with their expected micro and macro F1.
type Fixture<'a> = (&'a [(&'a str, &'a str)], f64, f64);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---- 1: gradients ----

fn toy_config(heads: &str) -> ModelConfig {
    let mut c = ModelConfig::new(heads.parse().unwrap(), SentenceConfigKind::Mix);
    c.encoder = EncoderConfig { layers: 1, dim: 8, heads: 2, ff_dim: 16, max_len: 64 };
    c.routing = HeadConfig { n_hid: 3, hidden_d: 6, out_d: 5, iterations: 2 };
    c.decoder = DecoderHeadConfig { layers: 1, heads: 2, ff_dim: 16, ..DecoderHeadConfig::default() };
    c
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let opts = GradCheckOptions { floor: 1e-5, ..GradCheckOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // (a) one routing layer, gradients w.r.t. inputs and parameters.
    let mut store = ParamStore::new();
    let spec = RoutingSpec::new(3, 4).unwrap().with_iterations(3).unwrap();
    let params = RoutingParams::init(&mut store, "route", 5, &spec, &mut rng);
    let x = store.add("x", random_tensor(6, 5, &mut rng));
    let probe = random_tensor(3, 4, &mut rng);
    let route_err = grad_check_params(
        &store,
        |g| {
            let input = g.param(x);
            let out = caprel::routing::route_on_graph(g, input, &params, &spec)?;
            let p = g.constant(probe.clone());
            let prod = g.mul(out.capsules, p)?;
            g.sum_all(prod)
        },
        &opts,
    )
    .map_err(|e| e.to_string())?
    .max_rel_error;

    // (b) a full H3 head over stacked hidden states.
    let mut store = ParamStore::new();
    let cfg = HeadConfig { n_hid: 4, hidden_d: 5, out_d: 6, iterations: 3 };
    let head = RoutingHead::init(&mut store, HeadKind::H3, 4, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let hs = HiddenStates::new(
        Tensor::new(vec![3, 4, 4], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        vec![0; 4],
        HiddenSourceTag::Toy,
    )
    .map_err(|e| e.to_string())?;
    let flat = store.add("hidden", hs.flat());
    let probe = random_tensor(1, 6, &mut rng);
    let head_err = grad_check_params(
        &store,
        |g| {
            let f = g.param(flat);
            let nodes = head_on_graph(g, f, 3, &head, None)?;
            let p = g.constant(probe.clone());
            let prod = g.mul(nodes.vector, p)?;
            g.sum_all(prod)
        },
        &opts,
    )
    .map_err(|e| e.to_string())?
    .max_rel_error;

    // (c) the training loss of a toy model with every head, through the encoder.
    let corpus = generate_synthetic(&SynthSpec {
        n_relations: 3,
        n_entity_types: 3,
        negative_ratio: 0.25,
        n_train: 8,
        n_test: 2,
        surfaces_per_type: 3,
        templates_per_relation: 1,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?
    .train;
    let model = Model::for_corpus(toy_config("h1,h2,h3,decoder"), &corpus, 4).map_err(|e| e.to_string())?;
    let inst = corpus.instances.iter().find(|i| i.relation != "no_relation").unwrap();
    let prepared = model.prepare(inst).map_err(|e| e.to_string())?;
    let mut store = model.store.clone();
    // A zero classifier would block every gradient below it.
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).name.starts_with("classifier") {
            let shape = store.value(id).shape().to_vec();
            let n: usize = shape.iter().product();
            store.get_mut(id).value =
                Tensor::new(shape, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        }
    }
    let loss_err = grad_check_params(
        &store,
        |g| Ok(model.record(g, &prepared)?.loss),
        &GradCheckOptions { max_coords: Some(8), ..opts.clone() },
    )
    .map_err(|e| e.to_string())?
    .max_rel_error;

    let secs = start.elapsed().as_secs_f64();
    let worst = route_err.max(head_err).max(loss_err);
    ensure(
        worst < 1e-4 && secs < 60.0,
        format!("max rel err route {route_err:.2e}, H3 head {head_err:.2e}, full loss {loss_err:.2e}; {secs:.1}s"),
    )
}

// ---- 2, 3, 4: routing properties ----

fn credit_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..16);
        let d_in = rng.random_range(1..8);
        let n_out = rng.random_range(1..6);
        let d_out = rng.random_range(1..6);
        let iterations = rng.random_range(1..6);
        let spec = RoutingSpec::new(n_out, d_out).unwrap().with_iterations(iterations).unwrap();
        let mut store = ParamStore::new();
        let params = RoutingParams::init(&mut store, "r", d_in, &spec, &mut rng);
        let scale = rng.random_range(0.1..5.0);
        let x =
            Tensor::new(vec![m, d_in], (0..m * d_in).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, trace) =
            route_traced(&CapsuleSequence::new(x).unwrap(), &params, &spec, &store).map_err(|e| e.to_string())?;
        for credits in &trace {
            for r in 0..credits.rows() {
                worst = worst.max((credits.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst < 1e-9, format!("1000 inputs, worst |row sum - 1| = {worst:.1e}"))
}

fn permutation_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = RoutingSpec::new(4, 6).unwrap();
    let mut store = ParamStore::new();
    let params = RoutingParams::init(&mut store, "r", 8, &spec, &mut rng);
    let inputs = CapsuleSequence::new(random_tensor(12, 8, &mut rng)).unwrap();
    let base = route_traced(&inputs, &params, &spec, &store).map_err(|e| e.to_string())?.0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let out = route_traced(&inputs.permuted(&perm).unwrap(), &params, &spec, &store).map_err(|e| e.to_string())?.0;
        worst = worst.max(max_abs_diff(&rows(&out.capsules), &rows(&base.capsules)));
    }
    ensure(worst < 1e-9, format!("100 permutations, max output change {worst:.1e}"))
}

fn oracle_equivalence() -> Check {
    let (x, w, b) = small_fixture();
    let (store, params, spec) = routing_fixture(&w, &b, 2, 2, 2);
    let inputs = CapsuleSequence::new(Tensor::from_rows(&x).unwrap()).unwrap();
    let (out, trace) = route_traced(&inputs, &params, &spec, &store).map_err(|e| e.to_string())?;
    let (want_out, want_trace) = oracle_route(&x, &w, &b, 2, 2, 2);
    let mut diff = max_abs_diff(&rows(&out.capsules), &want_out);
    for (got, want) in trace.iter().zip(&want_trace) {
        diff = diff.max(max_abs_diff(&rows(got), want));
    }
    ensure(diff < 1e-12, format!("outputs and credits within {diff:.1e} of the scalar oracle"))
}

// ---- 5, 7, 8: desk-scale training runs ----

fn training(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: Some(8), learning_rate: Some(1e-3), epochs, seed: 7, target_train_f1: None }
}

const EPOCHS: usize = 10;

struct Trained {
    model: Model,
    secs: f64,
}

fn train_model(heads: &str, corpus: &SynthCorpus) -> Result<Trained, String> {
    let start = Instant::now();
    let mut model =
        Model::for_corpus(ModelConfig::new(heads.parse().unwrap(), SentenceConfigKind::Mix), &corpus.train, 7)
            .map_err(|e| e.to_string())?;
    train(&mut model, &corpus.train, &training(EPOCHS), None).map_err(|e| e.to_string())?;
    Ok(Trained { model, secs: start.elapsed().as_secs_f64() })
}

fn micro_f1(model: &Model, corpus: &Corpus) -> Result<f64, String> {
    Ok(evaluate(model, corpus).map_err(|e| e.to_string())?.0.micro_f1)
}

fn last_gap(m: &CategoryMatrix) -> f64 {
    m.head_gap(m.layers() - 1)
}

struct Shared {
    corpus: SynthCorpus,
    h3: Option<Trained>,
}

impl Shared {
    fn h3(&mut self) -> Result<&Trained, String> {
        if self.h3.is_none() {
            self.h3 = Some(train_model("h3", &self.corpus)?);
        }
        Ok(self.h3.as_ref().unwrap())
    }
}

fn overfit(shared: &mut Shared) -> Check {
    shared.h3()?;
    let (t, corpus) = (shared.h3.as_ref().unwrap(), &shared.corpus);
    let train_f1 = micro_f1(&t.model, &corpus.train)?;
    let test_f1 = micro_f1(&t.model, &corpus.test)?;
    let secs = t.secs;
    ensure(
        train_f1 >= 0.99 && test_f1 >= 0.90 && secs < 600.0,
        format!("train micro-F1 {train_f1:.3}, test {test_f1:.3} after {EPOCHS} epochs in {secs:.0}s"),
    )
}

fn reshaping(shared: &mut Shared) -> Check {
    let corpus = shared.corpus.clone();
    let pairs = build_analogy_pairs(&corpus.test, 300, 1).map_err(|e| e.to_string())?;
    let untrained =
        Model::for_corpus(ModelConfig::new("h3".parse().unwrap(), SentenceConfigKind::Mix), &corpus.train, 7)
            .map_err(|e| e.to_string())?;
    let before = last_gap(
        &category_matrix(&untrained, &corpus.test, &pairs, Metric::Cosine, "before").map_err(|e| e.to_string())?,
    );
    let after = last_gap(
        &category_matrix(&shared.h3()?.model, &corpus.test, &pairs, Metric::Cosine, "after")
            .map_err(|e| e.to_string())?,
    );
    let decoder = train_model("decoder", &corpus)?;
    let decoder_gap = last_gap(
        &category_matrix(&decoder.model, &corpus.test, &pairs, Metric::Cosine, "decoder").map_err(|e| e.to_string())?,
    );
    ensure(
        before.abs() < 0.1 && after > 0.2 && after > decoder_gap,
        format!("last-layer head gap before {before:.3}, after H3 {after:.3}, after decoder {decoder_gap:.3}"),
    )
}

fn noise_mining() -> Check {
    let corpus =
        generate_synthetic(&SynthSpec { noise_rate: 0.1, ..SynthSpec::default() }).map_err(|e| e.to_string())?;
    let t = train_model("h3", &corpus)?;
    let (_, records) = evaluate(&t.model, &corpus.test).map_err(|e| e.to_string())?;
    let test_ids: std::collections::HashSet<&str> = corpus.test.instances.iter().map(|i| i.id.as_str()).collect();
    let flips: Vec<_> = corpus.flips.iter().filter(|f| test_ids.contains(f.id.as_str())).cloned().collect();
    let report = noise_recovery_report(&mine_disagreements(&records), &flips);
    let recall = report.recall.unwrap_or(0.0);
    ensure(
        recall >= 0.7,
        format!(
            "recovered {}/{} test flips (recall {recall:.2}, precision {:.2})",
            report.recovered,
            report.flips,
            report.precision.unwrap_or(0.0)
        ),
    )
}

// ---- 6 ----

fn sentence_configs() -> Check {
    let corpus = generate_synthetic(&SynthSpec {
        n_relations: 5,
        n_entity_types: 4,
        negative_ratio: 0.0,
        informative_templates: false,
        ambiguous_surfaces: true,
        type_determines_relation: true,
        n_train: 300,
        n_test: 100,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let mut f1 = Vec::new();
    for kind in [SentenceConfigKind::Abstract, SentenceConfigKind::Mix, SentenceConfigKind::Entities] {
        let mut model = Model::for_corpus(ModelConfig::new("h3".parse().unwrap(), kind), &corpus.train, 7)
            .map_err(|e| e.to_string())?;
        train(&mut model, &corpus.train, &training(6), None).map_err(|e| e.to_string())?;
        f1.push(micro_f1(&model, &corpus.test)?);
    }
    let (abs, mix, ent) = (f1[0], f1[1], f1[2]);
    ensure(
        abs == 1.0 && mix == 1.0 && ent < abs && ent < mix,
        format!("test micro-F1 Abstract {abs:.3}, Mix {mix:.3}, Entities {ent:.3}"),
    )
}

// ---- 9 ----

fn metric_fixtures() -> Check {
    let nr = "no_relation";
    let fixtures: [Fixture; 3] = [
        (&[("r", "r"), ("r", "r"), (nr, "r"), ("r", nr)], 2.0 / 3.0, 2.0 / 3.0),
        (&[("a", "a"), ("a", nr), ("a", nr), ("b", "b"), ("b", "b"), ("c", nr), (nr, nr)], 2.0 / 3.0, 0.5),
        (&[("a", "b"), ("b", "a"), (nr, "a"), ("a", "a"), (nr, nr)], 2.0 / 7.0, 0.2),
    ];
    let mut got = Vec::new();
    for (pairs, micro, macro_) in fixtures {
        let m = score(pairs.iter().copied());
        if m.micro_f1 != micro || m.macro_f1 != macro_ {
            return Err(format!("expected micro {micro} macro {macro_}, got {} {}", m.micro_f1, m.macro_f1));
        }
        got.push(format!("{:.4}/{:.4}", m.micro_f1, m.macro_f1));
    }
    Ok(format!("micro/macro {} exact", got.join(", ")))
}

// ---- 10 ----

fn caprel(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_caprel")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("caprel {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn pipeline(root: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    caprel(&["synth", "--out", &p("data"), "--n-train", "40", "--n-test", "20", "--noise-rate", "0.1", "--seed", "3"])?;
    let model = toy_config("h1,h3");
    let cfg = serde_json::json!({ "model": model, "training": { "epochs": 2, "batch_size": 8 } });
    std::fs::write(root.join("train.json"), cfg.to_string()).map_err(|e| e.to_string())?;
    caprel(&[
        "train",
        "--config",
        &p("train.json"),
        "--train",
        &p("data/train.jsonl"),
        "--out",
        &p("run"),
        "--seed",
        "5",
    ])?;
    caprel(&["eval", "--checkpoint", &p("run/model.ckpt"), "--data", &p("data/test.jsonl"), "--out", &p("eval")])?;
    caprel(&[
        "analyze",
        "--checkpoint",
        &p("run/model.ckpt"),
        "--data",
        &p("data/test.jsonl"),
        "--out",
        &p("analysis"),
        "--max-pairs",
        "50",
    ])?;
    caprel(&[
        "mine",
        "--predictions",
        &p("eval/predictions.jsonl"),
        "--data",
        &p("data/test.jsonl"),
        "--flips",
        &p("data/flips.csv"),
        "--out",
        &p("mine"),
    ])?;
    caprel(&["render", "--input", &p("analysis/after_cosine.csv"), "--out", &p("render.ppm")])
}

/// Artifacts compared between reruns: everything except run metadata, which
/// records paths and wall-clock time.
fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if name == "meta.json" || name.ends_with(".config.json") || name == "train.json" {
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.push((rel, std::fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for needed in [
        "data/train.jsonl",
        "data/flips.csv",
        "run/model.ckpt",
        "run/trace.csv",
        "eval/predictions.csv",
        "analysis/after_cosine.csv",
        "mine/disagreements.csv",
        "render.ppm",
    ] {
        if !names.contains(&needed) {
            return Err(format!("pipeline did not write {needed}"));
        }
    }
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    ensure(
        fa.len() == fb.len() && differing.is_empty(),
        format!(
            "{} artifacts compared across two synth/train/eval/analyze/mine/render runs; differing: {differing:?}",
            fa.len()
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("CAPREL_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let corpus = generate_synthetic(&SynthSpec::default()).expect("default corpus");
    let mut shared = Shared { corpus, h3: None };
    let criteria: Vec<Criterion> = vec![
        (1, "gradient fidelity", Box::new(|_| gradient_fidelity())),
        (2, "credit conservation", Box::new(|_| credit_conservation())),
        (3, "permutation invariance", Box::new(|_| permutation_invariance())),
        (4, "oracle equivalence", Box::new(|_| oracle_equivalence())),
        (5, "overfit sanity", Box::new(overfit)),
        (6, "sentence configurations", Box::new(|_| sentence_configs())),
        (7, "head/tail re-representation", Box::new(reshaping)),
        (8, "noise mining recall", Box::new(|_| noise_mining())),
        (9, "metric fixtures", Box::new(|_| metric_fixtures())),
        (10, "CLI reproducibility", Box::new(|_| reproducibility())),
    ];
    let mut failed = 0;
    for (n, name, mut check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut shared))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
