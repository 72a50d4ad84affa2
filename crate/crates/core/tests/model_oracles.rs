mod common;

use common::ids;
use kgrules::model::{attention_matrix, export_attention, softmax};
use kgrules::{ModelConfig, ModelParams, RelationId, Selection};
use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line reimplementation of the forward pass over plain vectors.
struct Reference {
    d: usize,
    s: usize,
    hard: bool,
    emb: Vec<Vec<f64>>,
    w_ih: Vec<Vec<f64>>,
    w_hh: Vec<Vec<f64>>,
    b: Vec<f64>,
    h0: Vec<f64>,
    sel_w1: Vec<Vec<f64>>,
    sel_b1: Vec<f64>,
    sel_w2: Vec<f64>,
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
}

fn rows(m: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// `x M` for a row vector `x`.
fn vec_mat(x: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
    let cols = m[0].len();
    (0..cols).map(|j| (0..x.len()).map(|i| x[i] * m[i][j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn stable_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

impl Reference {
    fn new(p: &ModelParams) -> Self {
        Reference {
            d: p.config.dim,
            s: p.config.window_size,
            hard: p.config.selection == Selection::Hard,
            emb: rows(&p.emb),
            w_ih: rows(&p.w_ih),
            w_hh: rows(&p.w_hh),
            b: p.b.to_vec(),
            h0: p.h0.to_vec(),
            sel_w1: rows(&p.sel_w1),
            sel_b1: p.sel_b1.to_vec(),
            sel_w2: p.sel_w2.to_vec(),
            w_q: rows(&p.w_q),
            w_k: rows(&p.w_k),
        }
    }

    fn rnn(&self, window: &[Vec<f64>]) -> Vec<f64> {
        let mut h = self.h0.clone();
        for x in window {
            let a = vec_mat(x, &self.w_ih);
            let c = vec_mat(&h, &self.w_hh);
            h = (0..self.d).map(|j| (a[j] + c[j] + self.b[j]).tanh()).collect();
        }
        h
    }

    fn selector(&self, w: &[f64]) -> f64 {
        let a = vec_mat(w, &self.sel_w1);
        let hidden: Vec<f64> = a.iter().zip(&self.sel_b1).map(|(x, c)| (x + c).tanh()).collect();
        dot(&hidden, &self.sel_w2)
    }

    fn attend(&self, c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let q = vec_mat(c, &self.w_q);
        let mut keys = vec![vec_mat(c, &self.w_k)];
        for e in &self.emb {
            keys.push(vec_mat(e, &self.w_k));
        }
        let scale = (self.d as f64).sqrt();
        let logits: Vec<f64> = keys.iter().map(|k| dot(&q, k) / scale).collect();
        let theta = stable_softmax(&logits);
        let mut out = vec![0.0; self.d];
        for (t, k) in theta.iter().zip(&keys) {
            for j in 0..self.d {
                out[j] += t * k[j];
            }
        }
        (theta, out)
    }

    fn predict(&self, body: &[u32]) -> Vec<f64> {
        let mut tokens: Vec<Vec<f64>> = body.iter().map(|&r| self.emb[r as usize].clone()).collect();
        while tokens.len() > self.s {
            let encs: Vec<Vec<f64>> = (0..=tokens.len() - self.s)
                .map(|i| self.rnn(&tokens[i..i + self.s]))
                .collect();
            let scores: Vec<f64> = encs.iter().map(|w| self.selector(w)).collect();
            let mu = stable_softmax(&scores);
            let mut k = 0;
            for i in 1..mu.len() {
                if mu[i] > mu[k] {
                    k = i;
                }
            }
            let c: Vec<f64> = if self.hard {
                encs[k].iter().map(|v| mu[k] * v).collect()
            } else {
                (0..self.d).map(|j| encs.iter().zip(&mu).map(|(e, m)| m * e[j]).sum()).collect()
            };
            let (_, reduced) = self.attend(&c);
            tokens.splice(k..k + self.s, [reduced]);
        }
        let h = self.rnn(&tokens);
        self.attend(&h).0
    }
}

fn random_model(seed: u64, dim: usize, relations: usize, s: usize, selection: Selection) -> ModelParams {
    let cfg = ModelConfig {
        dim,
        window_size: s,
        hidden: dim,
        init_scale: 2.0,
        selection,
    };
    let mut p = ModelParams::init(cfg, relations, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in p.b.iter_mut().chain(p.h0.iter_mut()).chain(p.sel_b1.iter_mut()) {
        *v = rng.gen_range(-0.5..0.5);
    }
    p
}

#[test]
fn three_relation_body_matches_reference() {
    for seed in 0..20 {
        let p = random_model(seed, 6, 4, 2, Selection::Hard);
        let body = [(seed % 4) as u32, ((seed + 1) % 4) as u32, ((seed * 3) % 4) as u32];
        let got = p.predict(&ids(&body)).unwrap();
        let want = Reference::new(&p).predict(&body);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "seed {seed}: {g} vs {w}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn forward_matches_reference(
        seed in any::<u64>(),
        s in 2usize..=3,
        soft in any::<bool>(),
        body in prop::collection::vec(0u32..5, 2..=7),
    ) {
        let sel = if soft { Selection::Soft } else { Selection::Hard };
        let p = random_model(seed, 5, 5, s, sel);
        let got = p.predict(&ids(&body)).unwrap();
        let want = Reference::new(&p).predict(&body);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn trace_is_normalized_and_counts_steps(
        seed in any::<u64>(),
        s in 2usize..=3,
        body in prop::collection::vec(0u32..6, 2..=10),
    ) {
        let p = random_model(seed, 4, 6, s, Selection::Hard);
        let trace = p.forward(&ids(&body)).unwrap();
        // Each step folds `s` tokens into one.
        let expected = if body.len() > s { (body.len() - s).div_ceil(s - 1) } else { 0 };
        prop_assert_eq!(trace.steps.len(), expected);
        for st in &trace.steps {
            prop_assert!((st.mu.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!((st.theta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(st.theta.iter().all(|&t| t > 0.0 && t < 1.0));
            prop_assert!(st.chosen < st.mu.len());
        }
        prop_assert_eq!(trace.theta.len(), 7);
        prop_assert!((trace.theta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn selector_matches_softmax_of_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..50 {
        let p = random_model(seed, 8, 3, 2, Selection::Hard);
        let r = Reference::new(&p);
        let windows: Vec<Array1<f64>> = (0..3)
            .map(|_| Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let (mu, idx) = p.select_window(&windows);
        let scores: Vec<f64> = windows.iter().map(|w| r.selector(w.as_slice().unwrap())).collect();
        let want = stable_softmax(&scores);
        for (a, b) in mu.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let best = (0..3).fold(0, |k, i| if want[i] > want[k] { i } else { k });
        assert_eq!(idx, best);
    }
}

#[test]
fn window_encoding_depends_on_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut differing = 0;
    for seed in 0..100 {
        let p = random_model(seed, 8, 3, 2, Selection::Hard);
        let a = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let ab = p.encode_window(&[a.clone(), b.clone()]).unwrap();
        let ba = p.encode_window(&[b, a]).unwrap();
        let gap = ab.iter().zip(ba.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if gap > 1e-9 {
            differing += 1;
        }
    }
    assert_eq!(differing, 100);
}

#[test]
fn window_length_must_equal_window_size() {
    let p = random_model(0, 4, 3, 3, Selection::Hard);
    let x = Array1::zeros(4);
    assert!(p.encode_window(&[x.clone(), x]).is_err());
}

#[test]
fn attention_export_rows_are_distributions() {
    let mut b = kgrules::kg::VocabBuilder::new();
    for r in ["a", "b", "c"] {
        b.relation(r);
    }
    let vocab = b.finish(true).unwrap();
    let p = ModelParams::init(ModelConfig::new(64), 6, 3).unwrap();
    let csv = export_attention(&p, &vocab, true).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "first,second,NULL,a,b,c,a_inv,b_inv,c_inv");
    let mut rows = 0;
    for line in lines {
        let vals: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 7);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.1, "untrained row spread {spread}");
        rows += 1;
    }
    assert_eq!(rows, 36);

    let bodies: Vec<Vec<RelationId>> = vec![ids(&[0, 1]), ids(&[2, 2])];
    let refs: Vec<&[RelationId]> = bodies.iter().map(|b| b.as_slice()).collect();
    let without = attention_matrix(&p, &refs, false).unwrap();
    for row in without.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_is_shift_invariant() {
    let x = [1000.0, 1001.0, 999.0];
    let y = softmax(&x);
    let z = softmax(&[0.0, 1.0, -1.0]);
    for (a, b) in y.iter().zip(&z) {
        assert!((a - b).abs() < 1e-15);
    }
}
