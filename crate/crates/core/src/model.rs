//! Recurrent attention model over relation paths.
//!
//! A body `[r1, ..., rn]` is embedded row-wise. While more than `s` tokens
//! remain, every contiguous window of `s` tokens is encoded by a tanh RNN,
//! a small MLP scores the windows, the best window (scaled by its softmax
//! weight) attends over `[c; E]`, and the attention-weighted key replaces the
//! window. The last `<= s` tokens are encoded the same way and the attention
//! distribution of that final step is the prediction: slot 0 is the null
//! label, slot `1 + r` is relation `r`.
//!
//! Row-vector convention throughout: `h' = tanh(x W_ih + h W_hh + b)`,
//! `q = c W_Q`, keys `k = h W_K`, and values share the key projection.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{RelationId, Vocab};

const CHECKPOINT_MAGIC: &str = "kgrules-checkpoint v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Argmax window, its encoding scaled by its weight.
    Hard,
    /// Weight-averaged mixture of all windows.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub window_size: usize,
    pub hidden: usize,
    /// Uniform init half-width is `init_scale / sqrt(dim)`.
    pub init_scale: f64,
    pub selection: Selection,
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        ModelConfig {
            dim,
            window_size: 2,
            hidden: dim,
            init_scale: 1.0,
            selection: Selection::Hard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if self.window_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "window size must be at least 2, got {}",
                self.window_size
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::InvalidArgument("init scale must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(64)
    }
}

/// All learned tensors. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `|R| x d` relation embeddings.
    pub emb: Array2<f64>,
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b: Array1<f64>,
    pub h0: Array1<f64>,
    /// Selector `f(w) = v2 . tanh(w V1 + c1)`.
    pub sel_w1: Array2<f64>,
    pub sel_b1: Array1<f64>,
    pub sel_w2: Array1<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
}

pub type Gradients = ModelParams;

pub const TENSOR_NAMES: [&str; 10] = [
    "emb", "w_ih", "w_hh", "b", "h0", "sel_w1", "sel_b1", "sel_w2", "w_q", "w_k",
];

impl ModelParams {
    /// Uniform init for weight matrices; biases and `h0` start at zero.
    pub fn init(config: ModelConfig, num_relations: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_relations == 0 {
            return Err(Error::InvalidArgument("model needs at least one relation".into()));
        }
        let (d, hid) = (config.dim, config.hidden);
        let a = config.init_scale / (d as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || dist.sample(&mut rng));
        let emb = mat(num_relations, d);
        let w_ih = mat(d, d);
        let w_hh = mat(d, d);
        let sel_w1 = mat(d, hid);
        let sel_w2 = mat(hid, 1).into_shape_with_order(hid).expect("column to vector");
        let w_q = mat(d, d);
        let w_k = mat(d, d);
        Ok(ModelParams {
            config,
            emb,
            w_ih,
            w_hh,
            b: Array1::zeros(d),
            h0: Array1::zeros(d),
            sel_w1,
            sel_b1: Array1::zeros(hid),
            sel_w2,
            w_q,
            w_k,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_relations(&self) -> usize {
        self.emb.nrows()
    }

    /// Output width: null slot plus one slot per relation.
    pub fn num_classes(&self) -> usize {
        self.emb.nrows() + 1
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 10] {
        fn f<'a>(a: &'static str, s: Option<&'a [f64]>) -> (&'static str, &'a [f64]) {
            (a, s.expect("standard layout"))
        }
        [
            f("emb", self.emb.as_slice()),
            f("w_ih", self.w_ih.as_slice()),
            f("w_hh", self.w_hh.as_slice()),
            f("b", self.b.as_slice()),
            f("h0", self.h0.as_slice()),
            f("sel_w1", self.sel_w1.as_slice()),
            f("sel_b1", self.sel_b1.as_slice()),
            f("sel_w2", self.sel_w2.as_slice()),
            f("w_q", self.w_q.as_slice()),
            f("w_k", self.w_k.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 10] {
        fn f<'a>(a: &'static str, s: Option<&'a mut [f64]>) -> (&'static str, &'a mut [f64]) {
            (a, s.expect("standard layout"))
        }
        [
            f("emb", self.emb.as_slice_mut()),
            f("w_ih", self.w_ih.as_slice_mut()),
            f("w_hh", self.w_hh.as_slice_mut()),
            f("b", self.b.as_slice_mut()),
            f("h0", self.h0.as_slice_mut()),
            f("sel_w1", self.sel_w1.as_slice_mut()),
            f("sel_b1", self.sel_b1.as_slice_mut()),
            f("sel_w2", self.sel_w2.as_slice_mut()),
            f("w_q", self.w_q.as_slice_mut()),
            f("w_k", self.w_k.as_slice_mut()),
        ]
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    /// Final-run RNN over an arbitrary-length sequence (at least one token).
    fn run_rnn(&self, tokens: &[ArrayView1<f64>]) -> Array1<f64> {
        let mut h = self.h0.clone();
        for x in tokens {
            let mut z = x.dot(&self.w_ih) + h.dot(&self.w_hh) + &self.b;
            z.mapv_inplace(f64::tanh);
            h = z;
        }
        h
    }

    /// Encodes exactly one window of `s` embeddings into its final hidden state.
    pub fn encode_window(&self, window: &[Array1<f64>]) -> Result<Array1<f64>> {
        if window.len() != self.config.window_size {
            return Err(Error::InvalidArgument(format!(
                "window has {} tokens, expected {}",
                window.len(),
                self.config.window_size
            )));
        }
        let views: Vec<ArrayView1<f64>> = window.iter().map(|w| w.view()).collect();
        Ok(self.run_rnn(&views))
    }

    fn selector_score(&self, w: &Array1<f64>) -> f64 {
        let mut a = w.dot(&self.sel_w1) + &self.sel_b1;
        a.mapv_inplace(f64::tanh);
        a.dot(&self.sel_w2)
    }

    /// Softmax of selector scores and the argmax (lowest index on ties).
    pub fn select_window(&self, windows: &[Array1<f64>]) -> (Vec<f64>, usize) {
        let scores: Vec<f64> = windows.iter().map(|w| self.selector_score(w)).collect();
        let mu = softmax(&scores);
        let idx = argmax(&mu);
        (mu, idx)
    }

    /// Attention of a composition `w` over `[w; E]`: returns `theta` and the
    /// reduced embedding `theta [w; E] W_K`.
    pub fn attend(&self, w: &Array1<f64>) -> Result<(Vec<f64>, Array1<f64>)> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention input".into()));
        }
        let engine = Engine::new(self);
        let c = w.view().insert_axis(Axis(0)).to_owned();
        let cache = engine.attend(c);
        let what = engine.reduced(&cache);
        Ok((cache.theta.row(0).to_vec(), what.row(0).to_owned()))
    }

    /// Full reduction trace for one body.
    pub fn forward(&self, body: &[RelationId]) -> Result<ReductionTrace> {
        self.check_body(body)?;
        let engine = Engine::new(self);
        let fwd = engine.forward(&[body]);
        let steps = fwd
            .steps
            .iter()
            .map(|st| StepRecord {
                mu: st.mu.row(0).to_vec(),
                chosen: st.sel[0],
                theta: st.attn.theta.row(0).to_vec(),
                reduced: st.what.row(0).to_vec(),
            })
            .collect();
        Ok(ReductionTrace {
            steps,
            theta: fwd.last.attn.theta.row(0).to_vec(),
        })
    }

    /// Final distribution for one body.
    pub fn predict(&self, body: &[RelationId]) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[body])?.row(0).to_vec())
    }

    /// Final distributions for many bodies, one row each. Bodies may differ
    /// in length.
    pub fn predict_batch(&self, bodies: &[&[RelationId]]) -> Result<Array2<f64>> {
        for b in bodies {
            self.check_body(b)?;
        }
        let engine = Engine::new(self);
        let mut out = Array2::zeros((bodies.len(), self.num_classes()));
        for (_, idx) in group_by_len(bodies) {
            let group: Vec<&[RelationId]> = idx.iter().map(|&i| bodies[i]).collect();
            let fwd = engine.forward(&group);
            for (row, &i) in idx.iter().enumerate() {
                out.row_mut(i).assign(&fwd.last.attn.theta.row(row));
            }
        }
        Ok(out)
    }

    fn check_body(&self, body: &[RelationId]) -> Result<()> {
        if body.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "body needs at least two relations, got {}",
                body.len()
            )));
        }
        if let Some(r) = body.iter().find(|r| r.index() >= self.num_relations()) {
            return Err(Error::InvalidArgument(format!("relation id {} out of range", r.0)));
        }
        Ok(())
    }

    /// Summed cross-entropy and its gradient for bodies of one shared length.
    /// The gradient is scaled by `1 / norm` so shards of a batch add up to the
    /// gradient of the batch mean.
    pub fn loss_and_grad_group(
        &self,
        bodies: &[&[RelationId]],
        labels: &[usize],
        norm: f64,
    ) -> (f64, Gradients) {
        let engine = Engine::new(self);
        let fwd = engine.forward(bodies);
        let theta = &fwd.last.attn.theta;
        let mut loss = 0.0;
        let mut dl = theta.clone();
        for (i, &y) in labels.iter().enumerate() {
            loss -= theta[[i, y]].ln();
            dl[[i, y]] -= 1.0;
        }
        dl /= norm;
        let mut g = self.zeros_like();
        engine.backward(bodies, &fwd, dl, &mut g);
        (loss, g)
    }

    /// Summed cross-entropy for bodies of mixed length.
    pub fn loss_sum(&self, bodies: &[&[RelationId]], labels: &[usize]) -> Result<f64> {
        let theta = self.predict_batch(bodies)?;
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -theta[[i, y]].ln())
            .sum())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "dim {}", c.dim);
        let _ = writeln!(out, "window_size {}", c.window_size);
        let _ = writeln!(out, "hidden {}", c.hidden);
        let _ = writeln!(out, "init_scale {}", c.init_scale);
        let sel = match c.selection {
            Selection::Hard => "hard",
            Selection::Soft => "soft",
        };
        let _ = writeln!(out, "selection {sel}");
        let _ = writeln!(out, "relations {}", self.num_relations());
        for (name, data) in self.tensors() {
            let _ = writeln!(out, "tensor {name} {}", data.len());
            let vals: Vec<String> = data.iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Snapshot(m);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("not a kgrules checkpoint".into()));
        }
        let field = |lines: &mut std::str::Lines, key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
            line.strip_prefix(key)
                .and_then(|s| s.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, got `{line}`")))
        };
        let num = |s: String| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}`")));
        let dim = num(field(&mut lines, "dim")?)?;
        let window_size = num(field(&mut lines, "window_size")?)?;
        let hidden = num(field(&mut lines, "hidden")?)?;
        let init_scale: f64 = field(&mut lines, "init_scale")?
            .parse()
            .map_err(|_| bad("bad init_scale".into()))?;
        let selection = match field(&mut lines, "selection")?.as_str() {
            "hard" => Selection::Hard,
            "soft" => Selection::Soft,
            other => return Err(bad(format!("unknown selection `{other}`"))),
        };
        let relations = num(field(&mut lines, "relations")?)?;
        let config = ModelConfig {
            dim,
            window_size,
            hidden,
            init_scale,
            selection,
        };
        let mut p = ModelParams::init(config, relations, 0)?;
        for (name, slot) in p.tensors_mut() {
            let header = field(&mut lines, "tensor")?;
            let expected = format!("{name} {}", slot.len());
            if header != expected {
                return Err(bad(format!("expected tensor `{expected}`, got `{header}`")));
            }
            let line = lines.next().ok_or_else(|| bad(format!("missing data for {name}")))?;
            let vals: Vec<f64> = if slot.is_empty() {
                Vec::new()
            } else {
                line.split(' ')
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(format!("bad value in {name}")))?
            };
            if vals.len() != slot.len() {
                return Err(bad(format!("{name}: {} values, expected {}", vals.len(), slot.len())));
            }
            slot.copy_from_slice(&vals);
        }
        Ok(p)
    }
}

/// Attention rows for every ordered pair of relations, as CSV with a header
/// of relation names. Columns: the two body relations, then (optionally) the
/// null slot, then one column per head relation.
pub fn export_attention(params: &ModelParams, vocab: &Vocab, include_null: bool) -> Result<String> {
    let r = params.num_relations();
    if vocab.num_relations() != r {
        return Err(Error::InvalidArgument(format!(
            "vocabulary has {} relations, model has {r}",
            vocab.num_relations()
        )));
    }
    let bodies: Vec<[RelationId; 2]> = (0..r as u32)
        .flat_map(|i| (0..r as u32).map(move |j| [RelationId(i), RelationId(j)]))
        .collect();
    let refs: Vec<&[RelationId]> = bodies.iter().map(|b| b.as_slice()).collect();
    let theta = attention_matrix(params, &refs, include_null)?;
    let mut out = String::from("first,second");
    if include_null {
        out.push_str(",NULL");
    }
    for name in vocab.relation_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (b, row) in bodies.iter().zip(theta.rows()) {
        out.push_str(vocab.relation_name(b[0]));
        out.push(',');
        out.push_str(vocab.relation_name(b[1]));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Final attention per body; without the null slot the remaining mass is
/// renormalized.
pub fn attention_matrix(params: &ModelParams, bodies: &[&[RelationId]], include_null: bool) -> Result<Array2<f64>> {
    let theta = params.predict_batch(bodies)?;
    if include_null {
        return Ok(theta);
    }
    let mut rest = theta.slice(s![.., 1..]).to_owned();
    for mut row in rest.rows_mut() {
        let z = row.sum();
        row /= z;
    }
    Ok(rest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub mu: Vec<f64>,
    pub chosen: usize,
    pub theta: Vec<f64>,
    pub reduced: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReductionTrace {
    pub steps: Vec<StepRecord>,
    /// Final prediction over `[null, r0, r1, ...]`.
    pub theta: Vec<f64>,
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Indices grouped by body length, in increasing length order.
pub(crate) fn group_by_len(bodies: &[&[RelationId]]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, b) in bodies.iter().enumerate() {
        groups.entry(b.len()).or_default().push(i);
    }
    groups.into_iter().collect()
}

struct AttnCache {
    c: Array2<f64>,
    q: Array2<f64>,
    k0: Array2<f64>,
    theta: Array2<f64>,
}

struct StepCache {
    tokens: Vec<Array2<f64>>,
    /// Hidden states per window, `s + 1` each (index 0 is `h0`).
    hs: Vec<Vec<Array2<f64>>>,
    acts: Vec<Array2<f64>>,
    mu: Array2<f64>,
    sel: Vec<usize>,
    attn: AttnCache,
    what: Array2<f64>,
}

struct FinalCache {
    tokens: Vec<Array2<f64>>,
    hs: Vec<Array2<f64>>,
    attn: AttnCache,
}

struct Forward {
    steps: Vec<StepCache>,
    last: FinalCache,
}

/// Batched forward/backward for bodies of one length.
struct Engine<'a> {
    p: &'a ModelParams,
    /// `E W_K`, shared by every attention call.
    keys: Array2<f64>,
    /// `h0 W_hh + b`, the constant part of the first RNN step.
    h0_proj: Array1<f64>,
    scale: f64,
}

impl<'a> Engine<'a> {
    fn new(p: &'a ModelParams) -> Self {
        Engine {
            p,
            keys: p.emb.dot(&p.w_k),
            h0_proj: p.h0.dot(&p.w_hh) + &p.b,
            scale: 1.0 / (p.config.dim as f64).sqrt(),
        }
    }

    fn rnn(&self, xw: &[Array2<f64>]) -> Vec<Array2<f64>> {
        let n = xw[0].nrows();
        let d = self.p.config.dim;
        let mut hs = Vec::with_capacity(xw.len() + 1);
        hs.push(self.p.h0.broadcast((n, d)).expect("broadcast h0").to_owned());
        for (t, x) in xw.iter().enumerate() {
            let mut z = x.clone();
            if t == 0 {
                z += &self.h0_proj;
            } else {
                general_mat_mul(1.0, &hs[t], &self.p.w_hh, 1.0, &mut z);
                z += &self.p.b;
            }
            z.mapv_inplace(f64::tanh);
            hs.push(z);
        }
        hs
    }

    /// Backpropagates `dh` on the last hidden state; writes the gradient with
    /// respect to each `x W_ih` term into `dxw`.
    fn rnn_backward(&self, hs: &[Array2<f64>], dh: Array2<f64>, dxw: &mut [Array2<f64>], g: &mut Gradients) {
        let mut dh = dh;
        for t in (0..dxw.len()).rev() {
            let mut dz = dh;
            Zip::from(&mut dz).and(&hs[t + 1]).for_each(|g, &h| *g *= 1.0 - h * h);
            g.b += &dz.sum_axis(Axis(0));
            dxw[t] += &dz;
            if t > 0 {
                general_mat_mul(1.0, &hs[t].t(), &dz, 1.0, &mut g.w_hh);
                dh = dz.dot(&self.p.w_hh.t());
            } else {
                let dzs = dz.sum_axis(Axis(0));
                let outer = self
                    .p
                    .h0
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&dzs.view().insert_axis(Axis(0)));
                g.w_hh += &outer;
                g.h0 += &self.p.w_hh.dot(&dzs);
                return;
            }
        }
    }

    fn attend(&self, c: Array2<f64>) -> AttnCache {
        let n = c.nrows();
        let r = self.keys.nrows();
        let q = c.dot(&self.p.w_q);
        let k0 = c.dot(&self.p.w_k);
        let mut theta = Array2::zeros((n, r + 1));
        {
            let mut rest = theta.slice_mut(s![.., 1..]);
            general_mat_mul(self.scale, &q, &self.keys.t(), 0.0, &mut rest);
        }
        for i in 0..n {
            theta[[i, 0]] = q.row(i).dot(&k0.row(i)) * self.scale;
        }
        softmax_rows(&mut theta);
        AttnCache { c, q, k0, theta }
    }

    fn reduced(&self, a: &AttnCache) -> Array2<f64> {
        let mut what = a.theta.slice(s![.., 1..]).dot(&self.keys);
        let t0 = a.theta.column(0);
        Zip::from(what.rows_mut())
            .and(a.k0.rows())
            .and(&t0)
            .for_each(|mut w, k, &t| w.scaled_add(t, &k));
        what
    }

    /// Gradient with respect to the composition `c`, given the gradient on
    /// the attention logits and any direct gradient on `k0`.
    fn attend_backward(
        &self,
        a: &AttnCache,
        dl: &Array2<f64>,
        mut dk0: Array2<f64>,
        g: &mut Gradients,
        dkeys: &mut Array2<f64>,
    ) -> Array2<f64> {
        let sc = self.scale;
        let dl0 = dl.column(0);
        let dlr = dl.slice(s![.., 1..]);
        // dq = (dl0 k0 + dl_rest K) / sqrt(d)
        let mut dq = dlr.dot(&self.keys);
        Zip::from(dq.rows_mut())
            .and(a.k0.rows())
            .and(&dl0)
            .for_each(|mut q, k, &l| q.scaled_add(l, &k));
        dq *= sc;
        Zip::from(dk0.rows_mut())
            .and(a.q.rows())
            .and(&dl0)
            .for_each(|mut k, q, &l| k.scaled_add(l * sc, &q));
        general_mat_mul(sc, &dlr.t(), &a.q, 1.0, dkeys);
        general_mat_mul(1.0, &a.c.t(), &dq, 1.0, &mut g.w_q);
        general_mat_mul(1.0, &a.c.t(), &dk0, 1.0, &mut g.w_k);
        let mut dc = dq.dot(&self.p.w_q.t());
        general_mat_mul(1.0, &dk0, &self.p.w_k.t(), 1.0, &mut dc);
        dc
    }

    fn embed(&self, bodies: &[&[RelationId]]) -> Vec<Array2<f64>> {
        let len = bodies[0].len();
        (0..len)
            .map(|j| {
                let idx: Vec<usize> = bodies.iter().map(|b| b[j].index()).collect();
                self.p.emb.select(Axis(0), &idx)
            })
            .collect()
    }

    fn forward(&self, bodies: &[&[RelationId]]) -> Forward {
        let s_ = self.p.config.window_size;
        let mut tokens = self.embed(bodies);
        let mut steps = Vec::new();
        while tokens.len() > s_ {
            let (cache, next) = self.reduce(tokens);
            steps.push(cache);
            tokens = next;
        }
        let xw: Vec<Array2<f64>> = tokens.iter().map(|x| x.dot(&self.p.w_ih)).collect();
        let hs = self.rnn(&xw);
        let attn = self.attend(hs.last().expect("non-empty").clone());
        Forward {
            steps,
            last: FinalCache { tokens, hs, attn },
        }
    }

    fn reduce(&self, tokens: Vec<Array2<f64>>) -> (StepCache, Vec<Array2<f64>>) {
        let p = self.p;
        let s_ = p.config.window_size;
        let len = tokens.len();
        let m = len + 1 - s_;
        let n = tokens[0].nrows();
        let xw: Vec<Array2<f64>> = tokens.iter().map(|x| x.dot(&p.w_ih)).collect();
        let mut hs = Vec::with_capacity(m);
        let mut acts = Vec::with_capacity(m);
        let mut scores = Array2::zeros((n, m));
        for i in 0..m {
            let h = self.rnn(&xw[i..i + s_]);
            let mut a = h[s_].dot(&p.sel_w1) + &p.sel_b1;
            a.mapv_inplace(f64::tanh);
            scores.column_mut(i).assign(&a.dot(&p.sel_w2));
            hs.push(h);
            acts.push(a);
        }
        let mut mu = scores;
        softmax_rows(&mut mu);
        let sel: Vec<usize> = mu
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("contiguous row")))
            .collect();
        let d = p.config.dim;
        let mut c = Array2::zeros((n, d));
        match p.config.selection {
            Selection::Hard => {
                for (b, &k) in sel.iter().enumerate() {
                    c.row_mut(b).scaled_add(mu[[b, k]], &hs[k][s_].row(b));
                }
            }
            Selection::Soft => {
                for (i, h) in hs.iter().enumerate() {
                    Zip::from(c.rows_mut())
                        .and(h[s_].rows())
                        .and(mu.column(i))
                        .for_each(|mut c, w, &u| c.scaled_add(u, &w));
                }
            }
        }
        let attn = self.attend(c);
        let what = self.reduced(&attn);
        let new_len = len - s_ + 1;
        let mut next: Vec<Array2<f64>> = (0..new_len).map(|_| Array2::zeros((n, d))).collect();
        for (b, &k) in sel.iter().enumerate() {
            for (j, out) in next.iter_mut().enumerate() {
                let src = match j.cmp(&k) {
                    std::cmp::Ordering::Less => tokens[j].row(b),
                    std::cmp::Ordering::Equal => what.row(b),
                    std::cmp::Ordering::Greater => tokens[j + s_ - 1].row(b),
                };
                out.row_mut(b).assign(&src);
            }
        }
        let cache = StepCache {
            tokens,
            hs,
            acts,
            mu,
            sel,
            attn,
            what,
        };
        (cache, next)
    }

    fn reduce_backward(
        &self,
        st: &StepCache,
        dnext: Vec<Array2<f64>>,
        g: &mut Gradients,
        dkeys: &mut Array2<f64>,
    ) -> Vec<Array2<f64>> {
        let p = self.p;
        let s_ = p.config.window_size;
        let len = st.tokens.len();
        let m = len + 1 - s_;
        let n = st.tokens[0].nrows();
        let d = p.config.dim;
        let mut dtok: Vec<Array2<f64>> = (0..len).map(|_| Array2::zeros((n, d))).collect();
        let mut dwhat = Array2::zeros((n, d));
        for (b, &k) in st.sel.iter().enumerate() {
            for (j, dn) in dnext.iter().enumerate() {
                let row = dn.row(b);
                match j.cmp(&k) {
                    std::cmp::Ordering::Less => dtok[j].row_mut(b).assign(&row),
                    std::cmp::Ordering::Equal => dwhat.row_mut(b).assign(&row),
                    std::cmp::Ordering::Greater => dtok[j + s_ - 1].row_mut(b).assign(&row),
                }
            }
        }

        // Reduced embedding: what = theta0 k0 + theta_rest K.
        let a = &st.attn;
        let mut dtheta = Array2::zeros((n, p.num_classes()));
        {
            let mut rest = dtheta.slice_mut(s![.., 1..]);
            general_mat_mul(1.0, &dwhat, &self.keys.t(), 0.0, &mut rest);
        }
        for b in 0..n {
            dtheta[[b, 0]] = dwhat.row(b).dot(&a.k0.row(b));
        }
        let mut dk0 = dwhat.clone();
        Zip::from(dk0.rows_mut())
            .and(a.theta.column(0))
            .for_each(|mut r, &t| r *= t);
        general_mat_mul(1.0, &a.theta.slice(s![.., 1..]).t(), &dwhat, 1.0, dkeys);
        let dl = softmax_backward(&a.theta, &dtheta);
        let dc = self.attend_backward(a, &dl, dk0, g, dkeys);

        // Composition c from the windows and their weights.
        let mut dw: Vec<Array2<f64>> = (0..m).map(|_| Array2::zeros((n, d))).collect();
        let mut dmu = Array2::zeros((n, m));
        match p.config.selection {
            Selection::Hard => {
                for (b, &k) in st.sel.iter().enumerate() {
                    let w = st.hs[k][s_].row(b);
                    dmu[[b, k]] = dc.row(b).dot(&w);
                    dw[k].row_mut(b).scaled_add(st.mu[[b, k]], &dc.row(b));
                }
            }
            Selection::Soft => {
                for i in 0..m {
                    let w = &st.hs[i][s_];
                    for b in 0..n {
                        dmu[[b, i]] = dc.row(b).dot(&w.row(b));
                    }
                    Zip::from(dw[i].rows_mut())
                        .and(dc.rows())
                        .and(st.mu.column(i))
                        .for_each(|mut o, r, &u| o.scaled_add(u, &r));
                }
            }
        }
        let dscore = softmax_backward(&st.mu, &dmu);

        // Selector MLP, then the window RNNs.
        let mut dxw: Vec<Array2<f64>> = (0..len).map(|_| Array2::zeros((n, d))).collect();
        for i in 0..m {
            let act = &st.acts[i];
            let ds = dscore.column(i);
            g.sel_w2 += &act.t().dot(&ds);
            let mut da = ds
                .insert_axis(Axis(1))
                .dot(&p.sel_w2.view().insert_axis(Axis(0)));
            Zip::from(&mut da).and(act).for_each(|g, &a| *g *= 1.0 - a * a);
            g.sel_b1 += &da.sum_axis(Axis(0));
            general_mat_mul(1.0, &st.hs[i][s_].t(), &da, 1.0, &mut g.sel_w1);
            let mut dwi = std::mem::replace(&mut dw[i], Array2::zeros((0, 0)));
            general_mat_mul(1.0, &da, &p.sel_w1.t(), 1.0, &mut dwi);
            self.rnn_backward(&st.hs[i], dwi, &mut dxw[i..i + s_], g);
        }
        for j in 0..len {
            general_mat_mul(1.0, &st.tokens[j].t(), &dxw[j], 1.0, &mut g.w_ih);
            general_mat_mul(1.0, &dxw[j], &p.w_ih.t(), 1.0, &mut dtok[j]);
        }
        dtok
    }

    /// Accumulates into `g` the gradient given `dl` on the final logits.
    fn backward(&self, bodies: &[&[RelationId]], fwd: &Forward, dl: Array2<f64>, g: &mut Gradients) {
        let p = self.p;
        let n = dl.nrows();
        let d = p.config.dim;
        let mut dkeys = Array2::zeros(self.keys.raw_dim());
        let last = &fwd.last;
        let dc = self.attend_backward(&last.attn, &dl, Array2::zeros((n, d)), g, &mut dkeys);
        let len = last.tokens.len();
        let mut dxw: Vec<Array2<f64>> = (0..len).map(|_| Array2::zeros((n, d))).collect();
        self.rnn_backward(&last.hs, dc, &mut dxw, g);
        let mut dtok: Vec<Array2<f64>> = Vec::with_capacity(len);
        for (tok, dx) in last.tokens.iter().zip(&dxw) {
            general_mat_mul(1.0, &tok.t(), dx, 1.0, &mut g.w_ih);
            dtok.push(dx.dot(&p.w_ih.t()));
        }
        for st in fwd.steps.iter().rev() {
            dtok = self.reduce_backward(st, dtok, g, &mut dkeys);
        }
        for (j, dt) in dtok.iter().enumerate() {
            for (b, body) in bodies.iter().enumerate() {
                g.emb.row_mut(body[j].index()).scaled_add(1.0, &dt.row(b));
            }
        }
        // keys = E W_K
        general_mat_mul(1.0, &p.emb.t(), &dkeys, 1.0, &mut g.w_k);
        general_mat_mul(1.0, &dkeys, &p.w_k.t(), 1.0, &mut g.emb);
    }
}

/// Row-wise softmax Jacobian-vector product.
fn softmax_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    for (mut o, yr) in out.rows_mut().into_iter().zip(y.rows()) {
        let dot = o.dot(&yr);
        Zip::from(&mut o).and(&yr).for_each(|g, &y| *g = y * (*g - dot));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rels(ids: &[u32]) -> Vec<RelationId> {
        ids.iter().map(|&i| RelationId(i)).collect()
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let mut p = ModelParams::init(ModelConfig::new(3), 2, 0).unwrap();
        p.w_ih.fill(0.0);
        p.w_hh.fill(0.0);
        let w = vec![Array1::zeros(3), Array1::zeros(3)];
        assert!(p.encode_window(&w).unwrap().iter().all(|&v| v == 0.0));
        assert!(p.encode_window(&w[..1]).is_err());
    }

    #[test]
    fn hand_computed_rnn() {
        let mut p = ModelParams::init(ModelConfig::new(2), 1, 0).unwrap();
        p.w_ih = array![[0.5, -0.3], [0.2, 0.8]];
        p.w_hh = array![[0.1, 0.4], [-0.6, 0.3]];
        p.b = array![0.05, -0.1];
        p.h0 = array![0.2, -0.2];
        let e1 = array![1.0, 0.0];
        let e2 = array![0.0, 1.0];
        // h1 = tanh(e1 W_ih + h0 W_hh + b), written out by hand.
        let h1 = [
            (0.5 + (0.2 * 0.1 + -0.2 * -0.6) + 0.05f64).tanh(),
            (-0.3 + (0.2 * 0.4 + -0.2 * 0.3) - 0.1f64).tanh(),
        ];
        let h2 = [
            (0.2 + (h1[0] * 0.1 + h1[1] * -0.6) + 0.05f64).tanh(),
            (0.8 + (h1[0] * 0.4 + h1[1] * 0.3) - 0.1f64).tanh(),
        ];
        let got = p.encode_window(&[e1, e2]).unwrap();
        assert!((got[0] - h2[0]).abs() < 1e-15);
        assert!((got[1] - h2[1]).abs() < 1e-15);
    }

    #[test]
    fn single_and_equal_windows() {
        let p = ModelParams::init(ModelConfig::new(4), 3, 1).unwrap();
        let w = Array1::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        assert_eq!(p.select_window(std::slice::from_ref(&w)), (vec![1.0], 0));
        let (mu, idx) = p.select_window(&[w.clone(), w.clone(), w]);
        assert_eq!(idx, 0);
        assert!(mu.iter().all(|&m| (m - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn closed_form_attention() {
        let mut p = ModelParams::init(ModelConfig::new(2), 1, 0).unwrap();
        p.w_q = Array2::eye(2);
        p.w_k = Array2::eye(2);
        p.emb = array![[0.0, 10.0]];
        let (theta, what) = p.attend(&array![10.0, 0.0]).unwrap();
        let l0 = 100.0 / 2f64.sqrt();
        let expect0 = 1.0 / (1.0 + (-l0).exp());
        assert!((theta[0] - expect0).abs() < 1e-15);
        assert!(theta[0] > 1.0 - 1e-12);
        assert!((what[0] - 10.0).abs() < 1e-9 && what[1].abs() < 1e-9);
        assert!(p.attend(&array![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn null_symmetry() {
        let mut p = ModelParams::init(ModelConfig::new(3), 2, 4).unwrap();
        p.w_q = Array2::eye(3);
        p.w_k = Array2::eye(3);
        let w = p.emb.row(1).to_owned();
        let (theta, _) = p.attend(&w).unwrap();
        assert!((theta[0] - theta[2]).abs() < 1e-12);
    }

    #[test]
    fn reduction_counts() {
        let p = ModelParams::init(ModelConfig::new(4), 6, 2).unwrap();
        assert!(p.forward(&rels(&[0, 1])).unwrap().steps.is_empty());
        assert_eq!(p.forward(&rels(&[0, 2, 3, 4, 2])).unwrap().steps.len(), 3);
        assert!(p.forward(&rels(&[0])).is_err());
        let mut cfg = ModelConfig::new(4);
        cfg.window_size = 3;
        let p3 = ModelParams::init(cfg, 6, 2).unwrap();
        assert!(p3.forward(&rels(&[0, 1])).unwrap().steps.is_empty());
        assert_eq!(p3.forward(&rels(&[0, 1, 2, 3, 4])).unwrap().steps.len(), 1);
    }

    #[test]
    fn batched_matches_single() {
        let p = ModelParams::init(ModelConfig::new(5), 4, 3).unwrap();
        let bodies = [rels(&[0, 1, 2]), rels(&[3, 3]), rels(&[2, 1, 0, 3])];
        let refs: Vec<&[RelationId]> = bodies.iter().map(|b| b.as_slice()).collect();
        let batch = p.predict_batch(&refs).unwrap();
        for (i, b) in bodies.iter().enumerate() {
            let single = p.forward(b).unwrap().theta;
            for (x, y) in batch.row(i).iter().zip(&single) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = ModelConfig::new(3);
        cfg.selection = Selection::Soft;
        cfg.window_size = 3;
        let p = ModelParams::init(cfg, 4, 9).unwrap();
        let back = ModelParams::from_text(&p.to_text()).unwrap();
        assert_eq!(p, back);
        assert!(ModelParams::from_text("garbage").is_err());
    }
}
