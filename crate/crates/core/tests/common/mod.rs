//! Helpers shared by the integration tests.
#![allow(dead_code)]

use caprel::routing::{RoutingParams, RoutingSpec};
use caprel::tensor::{ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

/// Plain-loop routing over explicit weights, written without the tensor
/// machinery. `w[a][j*d + k]`, `b[j*d + k]`. Returns the final output
/// capsules and the credits at every iteration, uniform start first.
pub fn oracle_route(
    x: &[Vec<f64>],
    w: &[Vec<f64>],
    b: &[f64],
    n_out: usize,
    d: usize,
    iterations: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let m = x.len();
    let mut votes = vec![vec![vec![0.0; d]; n_out]; m];
    for i in 0..m {
        for j in 0..n_out {
            for k in 0..d {
                let mut s = b[j * d + k];
                for (a, xa) in x[i].iter().enumerate() {
                    s += xa * w[a][j * d + k];
                }
                votes[i][j][k] = s;
            }
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![vec![0.0; n_out]; m];
    let mut credits = vec![vec![1.0 / n_out as f64; n_out]; m];
    let mut trace = vec![credits.clone()];
    let mut outputs = vec![vec![0.0; d]; n_out];
    for _ in 0..iterations {
        for j in 0..n_out {
            let total: f64 = (0..m).map(|i| credits[i][j]).sum();
            for k in 0..d {
                outputs[j][k] = (0..m).map(|i| credits[i][j] * votes[i][j][k]).sum::<f64>() / total;
            }
            if d > 1 {
                let mean = outputs[j].iter().sum::<f64>() / d as f64;
                let var = outputs[j].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for v in outputs[j].iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
        }
        for i in 0..m {
            for j in 0..n_out {
                let dot: f64 = (0..d).map(|k| votes[i][j][k] * outputs[j][k]).sum();
                logits[i][j] += scale * dot;
            }
            let top = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits[i].iter().map(|l| (l - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            credits[i] = exps.iter().map(|e| e / z).collect();
        }
        trace.push(credits.clone());
    }
    (outputs, trace)
}

/// A routing layer whose weights are set to `w` and `b`.
pub fn routing_fixture(
    w: &[Vec<f64>],
    b: &[f64],
    n_out: usize,
    d: usize,
    iterations: usize,
) -> (ParamStore, RoutingParams, RoutingSpec) {
    let spec = RoutingSpec::new(n_out, d).unwrap().with_iterations(iterations).unwrap();
    let mut store = ParamStore::new();
    let w_id = store.add("fixture.weights", Tensor::from_rows(w).unwrap());
    let b_id = store.add("fixture.bias", Tensor::from_rows(&[b.to_vec()]).unwrap());
    let params = RoutingParams { weights: w_id, bias: b_id, d_in: w.len() };
    (store, params, spec)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// The fixed m=2, n_out=2, d=2, R=2 routing fixture: inputs, weights, bias.
pub fn small_fixture() -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let x = vec![vec![0.5, -1.0], vec![1.5, 0.25]];
    let w = vec![vec![0.3, -0.2, 0.7, 0.1], vec![-0.4, 0.9, 0.05, -0.6]];
    let b = vec![0.1, -0.05, 0.0, 0.2];
    (x, w, b)
}
