//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run.

#![allow(dead_code)]

use ndarray::Array2;
use qbprf_core::autograd::{Graph, Var};
use qbprf_core::matcher::loss_ce;
use qbprf_core::params::ParamStore;
use qbprf_core::qbf::{Fusion, QbfConfig, Seq};
use qbprf_core::qbs::{loss_bag_infonce, loss_reward, loss_reward_batch, QbsConfig, Selector, SeqRows};
use qbprf_core::vae::{kl_divergence, loss_infonce};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const TOL_FUSION: f64 = 1e-3;

pub fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

/// Relative error of two gradient blocks; blocks whose true gradient
/// vanishes (attention key biases, to which softmax is invariant) are
/// judged on absolute error instead.
pub fn rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    let diff = (a - n).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt() + n.mapv(|v| v * v).sum().sqrt();
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

type Build<'b> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var + 'b;

/// Error of d loss / d input for each of `inputs`.
pub fn input_errors(store: &ParamStore<f64>, inputs: &[Array2<f64>], build: &Build<'_>) -> Vec<f64> {
    let value = |xs: &[Array2<f64>]| {
        let mut g = Graph::new(store);
        let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let l = build(&mut g, &vs);
        g.scalar(l)
    };
    let mut g = Graph::new(store);
    let vs: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let l = build(&mut g, &vs);
    let grads = g.backward(l);
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let analytic = grads.wrt(vs[i]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            let mut numeric = Array2::zeros(x.dim());
            for idx in ndarray::indices(x.dim()) {
                let mut plus = inputs.to_vec();
                plus[i][idx] += H;
                let mut minus = inputs.to_vec();
                minus[i][idx] -= H;
                numeric[idx] = (value(&plus) - value(&minus)) / (2.0 * H);
            }
            rel_err(&analytic, &numeric)
        })
        .collect()
}

/// Error of d loss / d parameter for every parameter in `store`.
pub fn param_errors(store: &mut ParamStore<f64>, inputs: &[Array2<f64>], build: &Build<'_>) -> Vec<(String, f64)> {
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let vs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let l = build(&mut g, &vs);
        (g.scalar(l), g.backward(l).into_params())
    };
    let analytic = eval(store).1;
    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    ids.into_iter()
        .map(|(id, name)| {
            let shape = store.get(id).dim();
            let mut numeric = Array2::zeros(shape);
            for idx in ndarray::indices(shape) {
                let orig = store.get(id)[idx];
                store.get_mut(id)[idx] = orig + H;
                let lp = eval(store).0;
                store.get_mut(id)[idx] = orig - H;
                let lm = eval(store).0;
                store.get_mut(id)[idx] = orig;
                numeric[idx] = (lp - lm) / (2.0 * H);
            }
            let a = analytic.get(id).cloned().unwrap_or_else(|| Array2::zeros(shape));
            (name, rel_err(&a, &numeric))
        })
        .collect()
}

/// Replace every parameter with fresh noise so zero-initialised
/// projections do not hide gradient paths.
pub fn scramble(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let (r, c) = store.get(id).dim();
        let noise = randn(r, c, seed + i as u64).mapv(|v| 0.5 * v);
        store.get_mut(id).assign(&noise);
    }
}

/// One named check: its worst error and the tolerance it must meet.
pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

fn worst(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

pub fn query_infonce() -> GradCase {
    let e = input_errors(&ParamStore::new(), &[randn(4, 5, 1), randn(4, 5, 2)], &|g, v| {
        loss_infonce(g, v[0], v[1], 0.7).unwrap()
    });
    GradCase {
        name: "L_q",
        worst: worst(e),
        tol: TOL,
    }
}

pub fn kl_term() -> GradCase {
    let e = input_errors(
        &ParamStore::new(),
        &[randn(3, 4, 3), randn(3, 4, 4).mapv(|v| 0.5 * v)],
        &|g, v| kl_divergence(g, v[0], v[1]),
    );
    GradCase {
        name: "KL",
        worst: worst(e),
        tol: TOL,
    }
}

pub fn bag_infonce() -> GradCase {
    let mask = vec![vec![true, false, true], vec![false, true, false]];
    let mut all = Vec::new();
    for intra in [false, true] {
        all.extend(input_errors(&ParamStore::new(), &[randn(2, 4, 5), randn(6, 4, 6)], &|g, v| {
            loss_bag_infonce(g, v[0], v[1], &mask, 0.7, intra).unwrap()
        }));
    }
    GradCase {
        name: "L_b",
        worst: worst(all),
        tol: TOL,
    }
}

pub fn reward() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let unif = Uniform::new(0.05, 0.95).unwrap();
    let probs = Array2::from_shape_simple_fn((5, 1), || unif.sample(&mut rng));
    let mut all = input_errors(&ParamStore::new(), &[randn(1, 4, 8), randn(5, 4, 9), probs.clone()], &|g, v| {
        loss_reward(g, v[0], v[1], v[2], 1e-4, 1e-3)
    });
    all.extend(input_errors(&ParamStore::new(), &[randn(2, 4, 10), randn(5, 4, 11), probs], &|g, v| {
        loss_reward_batch(g, v[0], v[1], v[2], &[0, 3, 5], 1e-4, 1e-3)
    }));
    GradCase {
        name: "L_reward",
        worst: worst(all),
        tol: TOL,
    }
}

pub fn cross_entropy() -> GradCase {
    let p = Array2::from_shape_vec((4, 1), vec![0.2, 0.7, 0.45, 0.9]).unwrap();
    let e = input_errors(&ParamStore::new(), &[p], &|g, v| loss_ce(g, v[0], &[0, 1, 1, 0]).unwrap());
    GradCase {
        name: "L_CE",
        worst: worst(e),
        tol: TOL,
    }
}

pub fn selector_stack() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let cfg = QbsConfig {
        bilstm_hidden: 3,
        ..QbsConfig::default()
    };
    let sel = Selector::new(&mut store, "qbs", 4, &cfg, &mut rng);
    let q = SeqRows {
        rows: vec![0, 1, 2],
        valid: vec![true, true, false],
    };
    let c1 = SeqRows {
        rows: vec![3, 4],
        valid: vec![true, true],
    };
    let c2 = SeqRows {
        rows: vec![5, 6],
        valid: vec![true, false],
    };
    let weights = Array2::from_shape_vec((2, 1), vec![0.3, -1.1]).unwrap();
    let build = |g: &mut Graph<'_, f64>, v: &[Var]| {
        let p = sel.probs(g, v[0], &[(&q, &c1), (&q, &c2)]);
        let w = g.constant(weights.clone());
        let y = g.mul(p, w);
        g.sum_all(y)
    };
    let inputs = [randn(9, 4, 13)];
    let mut all: Vec<f64> = param_errors(&mut store, &inputs, &build).into_iter().map(|e| e.1).collect();
    all.extend(input_errors(&store, &inputs, &build));
    GradCase {
        name: "selector",
        worst: worst(all),
        tol: TOL,
    }
}

pub fn fusion_stack() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let cfg = QbfConfig {
        d_model: 8,
        heads: 2,
        layers: 2,
        ..QbfConfig::default()
    };
    let fusion = Fusion::new(&mut store, "qbf", &cfg, &mut rng);
    scramble(&mut store, 100);
    let target = randn(6, 8, 18);
    let qv = [true, true, false];
    let v1 = [true, true];
    let v2 = [true, true, true, false];
    let build = |g: &mut Graph<'_, f64>, xs: &[Var]| {
        let bag = [Seq { x: xs[1], valid: &v1 }, Seq { x: xs[2], valid: &v2 }];
        let fused = fusion.fuse(g, Seq { x: xs[0], valid: &qv }, &bag).unwrap();
        let t = g.constant(target.clone());
        let y = g.mul(fused.sequence, t);
        g.sum_all(y)
    };
    let inputs = [randn(3, 8, 15), randn(2, 8, 16), randn(4, 8, 17)];
    let mut all: Vec<f64> = param_errors(&mut store, &inputs, &build).into_iter().map(|e| e.1).collect();
    all.extend(input_errors(&store, &inputs, &build));
    GradCase {
        name: "QBF stack",
        worst: worst(all),
        tol: TOL_FUSION,
    }
}

pub fn all_cases() -> Vec<GradCase> {
    vec![
        query_infonce(),
        kl_term(),
        bag_infonce(),
        reward(),
        cross_entropy(),
        selector_stack(),
        fusion_stack(),
    ]
}
