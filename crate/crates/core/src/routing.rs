//! Dynamic routing of a capsule sequence into a fixed set of output capsules.
//!
//! Every input capsule `i` casts a vote `v_ij = x_i·W_j + b_j` for each output
//! capsule `j` and holds one unit of credit, split across outputs by a
//! softmax over routing logits. Each iteration forms outputs as the
//! credit-weighted mean of votes (layer-normalized), then raises the logits of
//! votes that agree with their output:
//!
//! ```text
//! phi_ij = 0, c_ij = 1/n_out
//! repeat R times:
//!     out_j  = LN( Σ_i c_ij v_ij / Σ_i c_ij )
//!     phi_ij += ⟨v_ij, out_j⟩ / sqrt(d_out)
//!     c_ij   = softmax_j(phi_ij)
//! ```
//!
//! Parameters are shared across input positions, so one set of weights
//! accepts sequences of any length. All iterations are unrolled on the
//! recording graph and differentiated end to end.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::HiddenStates;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Graph, NodeId, ParamId, ParamStore, Tensor};

pub const DEFAULT_ITERATIONS: usize = 3;

/// `m` input capsules of dimension `d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleSequence {
    capsules: Tensor,
}

impl CapsuleSequence {
    pub fn new(capsules: Tensor) -> Result<Self> {
        if capsules.shape().len() != 2 {
            return Err(Error::dim("capsule sequence must be m×d"));
        }
        Ok(Self { capsules })
    }

    pub fn len(&self) -> usize {
        self.capsules.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.capsules.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.capsules
    }

    /// Rows reordered so that new row `k` is old row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.capsules.len());
        for &p in perm {
            if p >= self.len() {
                return Err(Error::Index(format!("row {p} of {}", self.len())));
            }
            data.extend_from_slice(self.capsules.row(p));
        }
        Self::new(Tensor::new(vec![perm.len(), d], data)?)
    }
}

/// Flattens `h×n×d` hidden states into `h·n` capsules; row `l·n + t` is
/// layer `l`, token `t`.
pub fn flatten_hidden(hs: &HiddenStates) -> Result<CapsuleSequence> {
    if hs.depth() == 0 || hs.is_empty() {
        return Err(Error::Empty("hidden states".into()));
    }
    CapsuleSequence::new(hs.flat())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSpec {
    pub n_out: usize,
    pub d_out: usize,
    pub iterations: usize,
    pub agreement_scale: f64,
}

impl RoutingSpec {
    pub fn new(n_out: usize, d_out: usize) -> Result<Self> {
        let spec =
            Self { n_out, d_out, iterations: DEFAULT_ITERATIONS, agreement_scale: 1.0 / (d_out.max(1) as f64).sqrt() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_iterations(mut self, iterations: usize) -> Result<Self> {
        self.iterations = iterations;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_out == 0 || self.d_out == 0 {
            return Err(Error::config("routing needs n_out ≥ 1 and d_out ≥ 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("routing needs at least one iteration"));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.n_out * self.d_out
    }
}

/// Learnable projections for one routing layer. Output capsule `j` uses
/// columns `j·d_out..(j+1)·d_out` of `weights` and `bias`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingParams {
    pub weights: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
}

impl RoutingParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        spec: &RoutingSpec,
        rng: &mut R,
    ) -> Self {
        let weights = store.normal(format!("{prefix}.weights"), &[d_in, spec.width()], 1.0 / (d_in as f64).sqrt(), rng);
        let bias = store.zeros(format!("{prefix}.bias"), &[1, spec.width()]);
        Self { weights, bias, d_in }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutput {
    /// `n_out × d_out`
    pub capsules: Tensor,
    /// `m × n_out`, rows sum to one.
    pub credits: Tensor,
}

/// Graph handles produced by [`route_on_graph`].
#[derive(Clone, Debug)]
pub struct RoutedNodes {
    pub capsules: NodeId,
    pub credits: NodeId,
    /// Credits in force at the start of each iteration plus the final ones.
    pub credit_trace: Vec<NodeId>,
}

/// Records the routing recurrence on `g` for the `m × d_in` input node.
pub fn route_on_graph(
    g: &mut Graph<'_>,
    inputs: NodeId,
    params: &RoutingParams,
    spec: &RoutingSpec,
) -> Result<RoutedNodes> {
    spec.validate()?;
    let (m, d_in) = {
        let v = g.value(inputs);
        (v.rows(), v.cols())
    };
    if d_in != params.d_in {
        return Err(Error::dim(format!("routing input dimension {d_in}, parameters expect {}", params.d_in)));
    }
    let w = g.param(params.weights);
    let b = g.param(params.bias);
    let votes = g.matmul(inputs, w)?;
    let votes = g.add_row(votes, b)?;

    let mut logits = g.constant(Tensor::zeros(&[m, spec.n_out]));
    let mut credits = g.constant(Tensor::filled(&[m, spec.n_out], 1.0 / spec.n_out as f64));
    let mut trace = vec![credits];
    let mut capsules = None;
    for _ in 0..spec.iterations {
        let mut out = g.capsule_mean(votes, credits, spec.d_out)?;
        // Normalizing a single scalar would erase it.
        if spec.d_out > 1 {
            out = g.layer_norm_rows(out)?;
        }
        let agreement = g.capsule_agreement(votes, out, spec.agreement_scale)?;
        logits = g.add(logits, agreement)?;
        credits = g.softmax_rows(logits)?;
        trace.push(credits);
        capsules = Some(out);
    }
    Ok(RoutedNodes { capsules: capsules.expect("at least one iteration"), credits, credit_trace: trace })
}

/// Routes `inputs` into `spec.n_out` capsules.
pub fn route(
    inputs: &CapsuleSequence,
    params: &RoutingParams,
    spec: &RoutingSpec,
    store: &ParamStore,
) -> Result<RoutingOutput> {
    let (out, _) = route_traced(inputs, params, spec, store)?;
    Ok(out)
}

/// Like [`route`], also returning the credit matrix at every iteration
/// (uniform start first, final last).
pub fn route_traced(
    inputs: &CapsuleSequence,
    params: &RoutingParams,
    spec: &RoutingSpec,
    store: &ParamStore,
) -> Result<(RoutingOutput, Vec<Tensor>)> {
    let mut g = Graph::with_params(store);
    let x = g.constant(inputs.tensor().clone());
    let nodes = route_on_graph(&mut g, x, params, spec)?;
    let trace = nodes.credit_trace.iter().map(|&n| g.value(n).clone()).collect();
    Ok((RoutingOutput { capsules: g.value(nodes.capsules).clone(), credits: g.value(nodes.credits).clone() }, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    /// Positivity head: two scalar capsules (positive, negative).
    H1,
    /// Joint representation of the two entity spans.
    H2,
    /// Whole marked sentence; the main head.
    H3,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::H1 => "H1",
            HeadKind::H2 => "H2",
            HeadKind::H3 => "H3",
        }
    }
}

/// Sizes shared by the routing heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub n_hid: usize,
    pub hidden_d: usize,
    pub out_d: usize,
    pub iterations: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { n_hid: 8, hidden_d: 256, out_d: 512, iterations: DEFAULT_ITERATIONS }
    }
}

/// Two routing stages: inputs → `n_hid` hidden capsules → output capsules.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingHead {
    pub kind: HeadKind,
    pub stage1: (RoutingSpec, RoutingParams),
    pub stage2: (RoutingSpec, RoutingParams),
}

impl RoutingHead {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: HeadKind,
        d_in: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let s1 = RoutingSpec::new(cfg.n_hid, cfg.hidden_d)?.with_iterations(cfg.iterations)?;
        let s2 = match kind {
            HeadKind::H1 => RoutingSpec::new(2, 1)?,
            HeadKind::H2 | HeadKind::H3 => RoutingSpec::new(1, cfg.out_d)?,
        }
        .with_iterations(cfg.iterations)?;
        let prefix = kind.name().to_lowercase();
        let p1 = RoutingParams::init(store, &format!("{prefix}.stage1"), d_in, &s1, rng);
        let p2 = RoutingParams::init(store, &format!("{prefix}.stage2"), s1.d_out, &s2, rng);
        Ok(Self { kind, stage1: (s1, p1), stage2: (s2, p2) })
    }

    /// Length of the head's output vector.
    pub fn output_dim(&self) -> usize {
        self.stage2.0.n_out * self.stage2.0.d_out
    }
}

#[derive(Clone, Debug)]
pub struct HeadNodes {
    /// `1 × output_dim`
    pub vector: NodeId,
    pub stage1_credits: NodeId,
    pub stage2_credits: NodeId,
}

/// Position rows of the flattened `(h·n)` capsule matrix kept by a token mask.
pub fn masked_rows(depth: usize, len: usize, mask: Option<&[bool]>) -> Result<Vec<usize>> {
    match mask {
        None => Ok((0..depth * len).collect()),
        Some(m) => {
            if m.len() != len {
                return Err(Error::dim(format!("mask of {} for {len} tokens", m.len())));
            }
            let rows: Vec<usize> =
                (0..depth).flat_map(|l| (0..len).filter(|&t| m[t]).map(move |t| l * len + t)).collect();
            if rows.is_empty() {
                return Err(Error::Empty("span mask selects no tokens".into()));
            }
            Ok(rows)
        }
    }
}

/// Records a head on `g` over `flat` (`(h·n) × d`). H2 requires a mask.
pub fn head_on_graph(
    g: &mut Graph<'_>,
    flat: NodeId,
    depth: usize,
    head: &RoutingHead,
    span_mask: Option<&[bool]>,
) -> Result<HeadNodes> {
    let rows = g.value(flat).rows();
    if depth == 0 || !rows.is_multiple_of(depth) {
        return Err(Error::dim(format!("{rows} capsules do not split into {depth} layers")));
    }
    let len = rows / depth;
    let mask = match (head.kind, span_mask) {
        (HeadKind::H2, None) => {
            return Err(Error::Empty("H2 needs an entity span mask".into()));
        }
        (_, m) => m,
    };
    let inputs = match mask {
        Some(_) => {
            let keep = masked_rows(depth, len, mask)?;
            g.select_rows(flat, &keep)?
        }
        None => flat,
    };
    let first = route_on_graph(g, inputs, &head.stage1.1, &head.stage1.0)?;
    let second = route_on_graph(g, first.capsules, &head.stage2.1, &head.stage2.0)?;
    let vector = g.reshape(second.capsules, &[1, head.output_dim()])?;
    Ok(HeadNodes { vector, stage1_credits: first.credits, stage2_credits: second.credits })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub kind: HeadKind,
    pub vector: Vec<f64>,
    /// `m × n_hid`
    pub stage1_credits: Tensor,
    /// `n_hid × n_out`
    pub stage2_credits: Tensor,
}

impl HeadOutput {
    /// Credits of every input capsule toward the final outputs, composed
    /// through both stages (`m × n_out`, rows sum to one).
    pub fn input_credits(&self) -> Result<Tensor> {
        matmul(&self.stage1_credits, &self.stage2_credits)
    }
}

/// Evaluates a head on hidden states without keeping the graph.
pub fn head_forward(
    hs: &HiddenStates,
    head: &RoutingHead,
    store: &ParamStore,
    span_mask: Option<&[bool]>,
) -> Result<HeadOutput> {
    let caps = flatten_hidden(hs)?;
    let mut g = Graph::with_params(store);
    let flat = g.constant(caps.tensor().clone());
    let nodes = head_on_graph(&mut g, flat, hs.depth(), head, span_mask)?;
    Ok(HeadOutput {
        kind: head.kind,
        vector: g.value(nodes.vector).data().to_vec(),
        stage1_credits: g.value(nodes.stage1_credits).clone(),
        stage2_credits: g.value(nodes.stage2_credits).clone(),
    })
}

/// Total credit all input capsules assign to the positive and negative
/// features of an H1 head.
pub fn positivity_credit(out: &HeadOutput) -> Result<(f64, f64)> {
    if out.kind != HeadKind::H1 {
        return Err(Error::Unsupported(format!("positivity credit needs an H1 head, got {}", out.kind.name())));
    }
    let credits = out.input_credits()?;
    let mut sums = (0.0, 0.0);
    for r in 0..credits.rows() {
        sums.0 += credits.get2(r, 0);
        sums.1 += credits.get2(r, 1);
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::HiddenSourceTag;
    use crate::tensor::{grad_check_params, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn hidden(h: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> HiddenStates {
        HiddenStates::new(random_tensor(&[h, n, d], rng), vec![], HiddenSourceTag::File).unwrap()
    }

    #[test]
    fn flatten_orders_layer_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hs = hidden(2, 3, 4, &mut rng);
        let caps = flatten_hidden(&hs).unwrap();
        assert_eq!(caps.len(), 6);
        assert_eq!(caps.tensor().row(4), hs.vector(1, 1));

        let one = hidden(1, 1, 5, &mut rng);
        assert_eq!(flatten_hidden(&one).unwrap().tensor().data(), one.vector(0, 0));
    }

    #[test]
    fn flatten_large_backbone_shape() {
        let hs = HiddenStates::new(Tensor::zeros(&[25, 12, 1024]), vec![], HiddenSourceTag::File).unwrap();
        let caps = flatten_hidden(&hs).unwrap();
        assert_eq!((caps.len(), caps.dim()), (300, 1024));
    }

    #[test]
    fn single_output_gets_all_credit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let spec = RoutingSpec::new(1, 4).unwrap();
        let params = RoutingParams::init(&mut store, "r", 3, &spec, &mut rng);
        let x = CapsuleSequence::new(random_tensor(&[5, 3], &mut rng)).unwrap();
        let out = route(&x, &params, &spec, &store).unwrap();
        assert!(out.credits.data().iter().all(|&c| c == 1.0));

        // Layer-normalized mean of the votes.
        let votes = matmul(x.tensor(), store.value(params.weights)).unwrap();
        let mut mean = [0.0; 4];
        for i in 0..5 {
            for k in 0..4 {
                mean[k] += votes.get2(i, k) / 5.0;
            }
        }
        let mu = mean.iter().sum::<f64>() / 4.0;
        let var = mean.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
        for k in 0..4 {
            let expect = (mean[k] - mu) / (var + 1e-5).sqrt();
            assert!((out.capsules.data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_specs_and_shapes() {
        assert!(RoutingSpec::new(0, 2).is_err());
        assert!(RoutingSpec::new(2, 2).unwrap().with_iterations(0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let spec = RoutingSpec::new(2, 2).unwrap();
        let params = RoutingParams::init(&mut store, "r", 3, &spec, &mut rng);
        let x = CapsuleSequence::new(Tensor::zeros(&[2, 4])).unwrap();
        assert!(matches!(route(&x, &params, &spec, &store), Err(Error::Dimension(_))));
    }

    #[test]
    fn same_params_accept_any_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let spec = RoutingSpec::new(3, 4).unwrap();
        let params = RoutingParams::init(&mut store, "r", 5, &spec, &mut rng);
        let before = store.total_len();
        for m in [1, 2, 7, 40] {
            let x = CapsuleSequence::new(random_tensor(&[m, 5], &mut rng)).unwrap();
            let out = route(&x, &params, &spec, &store).unwrap();
            assert_eq!(out.credits.shape(), &[m, 3]);
        }
        assert_eq!(store.total_len(), before);
    }

    #[test]
    fn credits_depend_on_the_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let spec = RoutingSpec::new(2, 3).unwrap();
        let params = RoutingParams::init(&mut store, "r", 2, &spec, &mut rng);
        // Both inputs have mean (1, 1).
        let a = CapsuleSequence::new(Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let b = CapsuleSequence::new(Tensor::from_rows(&[vec![1.0, 3.0], vec![1.0, -1.0]]).unwrap()).unwrap();
        let ca = route(&a, &params, &spec, &store).unwrap().credits;
        let cb = route(&b, &params, &spec, &store).unwrap().credits;
        assert!(ca.max_abs_diff(&cb) > 1e-3);
    }

    #[test]
    fn head_output_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = HeadConfig { n_hid: 3, hidden_d: 6, out_d: 10, iterations: 3 };
        let h1 = RoutingHead::init(&mut store, HeadKind::H1, 4, &cfg, &mut rng).unwrap();
        let h2 = RoutingHead::init(&mut store, HeadKind::H2, 4, &cfg, &mut rng).unwrap();
        let h3 = RoutingHead::init(&mut store, HeadKind::H3, 4, &cfg, &mut rng).unwrap();
        let hs = hidden(2, 5, 4, &mut rng);
        assert_eq!(head_forward(&hs, &h1, &store, None).unwrap().vector.len(), 2);
        assert_eq!(head_forward(&hs, &h3, &store, None).unwrap().vector.len(), 10);

        let mask = [false, true, false, true, true];
        let out = head_forward(&hs, &h2, &store, Some(&mask)).unwrap();
        assert_eq!(out.stage1_credits.rows(), 2 * 3);
        assert!(head_forward(&hs, &h2, &store, None).is_err());
        assert!(matches!(head_forward(&hs, &h2, &store, Some(&[false; 5])), Err(Error::Empty(_))));
    }

    #[test]
    fn degenerate_single_capsule_head_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = HeadConfig { n_hid: 2, hidden_d: 4, out_d: 3, iterations: 3 };
        let head = RoutingHead::init(&mut store, HeadKind::H3, 5, &cfg, &mut rng).unwrap();
        let hs = hidden(1, 1, 5, &mut rng);
        let a = head_forward(&hs, &head, &store, None).unwrap();
        let b = head_forward(&hs, &head, &store, None).unwrap();
        assert_eq!(a, b);
        // One input capsule holds all its credit; each stage reduces to a
        // normalized affine map of the input.
        let c = a.input_credits().unwrap();
        assert!((c.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn positivity_credit_at_uniform_credits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = HeadConfig { n_hid: 4, hidden_d: 3, out_d: 3, iterations: 3 };
        let head = RoutingHead::init(&mut store, HeadKind::H1, 3, &cfg, &mut rng).unwrap();
        // Zero weights and biases make every vote zero, so no agreement ever
        // moves the credits off uniform.
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let hs = hidden(2, 3, 3, &mut rng);
        let out = head_forward(&hs, &head, &store, None).unwrap();
        let (pos, neg) = positivity_credit(&out).unwrap();
        assert!((pos - 3.0).abs() < 1e-12 && (neg - 3.0).abs() < 1e-12);

        let h3 = RoutingHead::init(&mut store, HeadKind::H3, 3, &cfg, &mut rng).unwrap();
        let out3 = head_forward(&hs, &h3, &store, None).unwrap();
        assert!(positivity_credit(&out3).is_err());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = HeadConfig { n_hid: 3, hidden_d: 4, out_d: 5, iterations: 3 };
        let head = RoutingHead::init(&mut store, HeadKind::H3, 4, &cfg, &mut rng).unwrap();
        let hs = hidden(2, 3, 4, &mut rng);
        let x = store.add("x", hs.flat());
        let probe = random_tensor(&[1, 5], &mut rng);
        let report = grad_check_params(
            &store,
            |g| {
                let flat = g.param(x);
                let nodes = head_on_graph(g, flat, 2, &head, None)?;
                let p = g.constant(probe.clone());
                let prod = g.mul(nodes.vector, p)?;
                g.sum_all(prod)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
