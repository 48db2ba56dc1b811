//! Graph convolution, stacked LSTM, dropout and the dense softmax head.
//!
//! Batched inputs use time-major rows: graph features are `[T·B·N, C]` with row
//! `(t·B + b)·N + n`, sequences are `[T·B, D]` with row `t·B + b`. Reshaping a
//! graph feature matrix to `[T·B, N·C]` concatenates the nodes of each frame.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodygraph::BodyGraph;
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LayerError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("dropout probability {0} outside [0, 1)")]
    DropoutRate(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcMode {
    /// `Â_norm · X · W` with one weight matrix.
    #[default]
    Single,
    /// `X · W_self + (D⁻¹A) · X · W_neighbor`: each subset averaged over its cardinality.
    Partitioned,
}

/// Uniform in `±√(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-limit..limit)).collect())
}

fn param<'a>(params: &'a ParamStore, name: &str) -> Result<&'a Tensor, LayerError> {
    params.get(name).ok_or_else(|| LayerError::MissingParam(name.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcLayer {
    pub prefix: String,
    pub mode: GcMode,
    pub c_in: usize,
    pub c_out: usize,
}

impl GcLayer {
    pub fn new(prefix: impl Into<String>, mode: GcMode, c_in: usize, c_out: usize) -> Self {
        GcLayer { prefix: prefix.into(), mode, c_in, c_out }
    }

    pub fn weight_names(&self) -> Vec<String> {
        match self.mode {
            GcMode::Single => vec![format!("{}.w", self.prefix)],
            GcMode::Partitioned => vec![format!("{}.w_self", self.prefix), format!("{}.w_neighbor", self.prefix)],
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for name in self.weight_names() {
            store.insert(name, glorot(rng, self.c_in, self.c_out, vec![self.c_in, self.c_out]));
        }
    }

    /// `x` is `[blocks·N, c_in]`; every block of `N` rows is one graph signal.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var, graph: &BodyGraph) -> Var {
        match self.mode {
            GcMode::Single => {
                let xw = tape.matmul(x, b.get(&format!("{}.w", self.prefix)));
                tape.node_mix(xw, graph.propagation_mix())
            }
            GcMode::Partitioned => {
                let own = tape.matmul(x, b.get(&format!("{}.w_self", self.prefix)));
                let nb = tape.matmul(x, b.get(&format!("{}.w_neighbor", self.prefix)));
                let nb = tape.node_mix(nb, graph.neighbor_mix());
                tape.add(own, nb)
            }
        }
    }

    fn check(&self, x: &Tensor, graph: &BodyGraph, params: &ParamStore) -> Result<(), LayerError> {
        if x.shape().len() != 2 || x.rows() != graph.node_count() || x.cols() != self.c_in {
            return Err(LayerError::Shape(format!(
                "GC input {:?}, expected [{}, {}]",
                x.shape(),
                graph.node_count(),
                self.c_in
            )));
        }
        for name in self.weight_names() {
            let w = param(params, &name)?;
            if w.shape() != [self.c_in, self.c_out] {
                return Err(LayerError::Shape(format!("{name} is {:?}, expected [{}, {}]", w.shape(), self.c_in, self.c_out)));
            }
        }
        Ok(())
    }
}

/// Graph convolution of one `N × C_in` node feature matrix.
pub fn gc_forward(x: &Tensor, graph: &BodyGraph, layer: &GcLayer, params: &ParamStore) -> Result<Tensor, LayerError> {
    layer.check(x, graph, params)?;
    let mut tape = Tape::new();
    let b = tape.bind_frozen(params);
    let xv = tape.constant(x.clone());
    let out = layer.forward(&mut tape, &b, xv, graph);
    Ok(tape.value(out).clone())
}

/// One LSTM layer with gate order `i, f, g, o`: `W_x` is `[D, 4H]`, `W_h` is `[H, 4H]`, `b` is `[4H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub prefix: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(prefix: impl Into<String>, d_in: usize, hidden: usize) -> Self {
        LstmLayer { prefix: prefix.into(), d_in, hidden }
    }

    fn names(&self) -> [String; 3] {
        [format!("{}.w_x", self.prefix), format!("{}.w_h", self.prefix), format!("{}.b", self.prefix)]
    }

    /// Glorot weights, zero biases except the forget gate at 1.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let h = self.hidden;
        let [wx, wh, b] = self.names();
        store.insert(wx, glorot(rng, self.d_in, 4 * h, vec![self.d_in, 4 * h]));
        store.insert(wh, glorot(rng, h, 4 * h, vec![h, 4 * h]));
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].fill(1.0);
        store.insert(b, Tensor::vector(bias));
    }

    /// Runs over `seq` (`[T·B, D]`, time-major). Returns the `[T·B, H]` output sequence and the last `[B, H]` state.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, seq: Var, batch: usize) -> (Var, Var) {
        let [wx, wh, bias] = self.names();
        let (wx, wh, bias) = (b.get(&wx), b.get(&wh), b.get(&bias));
        let h = self.hidden;
        let steps = tape.value(seq).rows() / batch;
        let proj = tape.matmul(seq, wx);
        let proj = tape.add_row(proj, bias);

        let mut hs = Vec::with_capacity(steps);
        let mut state: Option<(Var, Var)> = None;
        for t in 0..steps {
            let mut gates = tape.slice_rows(proj, t * batch, batch);
            if let Some((hp, _)) = state {
                let rec = tape.matmul(hp, wh);
                gates = tape.add(gates, rec);
            }
            let i = tape.slice_cols(gates, 0, h);
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, h, h);
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(gates, 2 * h, h);
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h, h);
            let o = tape.sigmoid(o);
            let ig = tape.mul(i, g);
            let c = match state {
                Some((_, cp)) => {
                    let fc = tape.mul(f, cp);
                    tape.add(fc, ig)
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let hn = tape.mul(o, tc);
            hs.push(hn);
            state = Some((hn, c));
        }
        let last = state.expect("at least one step").0;
        let out = tape.concat_rows(&hs);
        (out, last)
    }
}

/// Forward LSTM over a `T × D` sequence; returns all hidden states `T × H` and the final `H`.
pub fn lstm_forward(seq: &Tensor, layer: &LstmLayer, params: &ParamStore) -> Result<(Tensor, Tensor), LayerError> {
    if seq.shape().len() != 2 || seq.rows() == 0 || seq.cols() != layer.d_in {
        return Err(LayerError::Shape(format!("LSTM input {:?}, expected [T, {}]", seq.shape(), layer.d_in)));
    }
    for name in layer.names() {
        param(params, &name)?;
    }
    let mut tape = Tape::new();
    let b = tape.bind_frozen(params);
    let x = tape.constant(seq.clone());
    let (all, last) = layer.forward(&mut tape, &b, x, 1);
    let last = tape.value(last).clone().reshape(vec![layer.hidden]);
    Ok((tape.value(all).clone(), last))
}

/// Inverted dropout mask: entries kept with probability `1 − p` and scaled by `1/(1 − p)`.
pub fn dropout_mask(shape: Vec<usize>, p: f64, rng: &mut impl Rng) -> Result<Tensor, LayerError> {
    if !(0.0..1.0).contains(&p) {
        return Err(LayerError::DropoutRate(p));
    }
    let n = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    Ok(Tensor::new(shape, (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()))
}

/// Dropout on the tape; identity when not training or `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var, LayerError> {
    if !(0.0..1.0).contains(&p) {
        return Err(LayerError::DropoutRate(p));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).shape().to_vec(), p, rng)?;
    let m = tape.constant(mask);
    Ok(tape.mul(x, m))
}

/// Fully connected layer followed by a row-wise softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSoftmax {
    pub prefix: String,
    pub d_in: usize,
    pub classes: usize,
}

impl DenseSoftmax {
    pub fn new(prefix: impl Into<String>, d_in: usize, classes: usize) -> Self {
        DenseSoftmax { prefix: prefix.into(), d_in, classes }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(format!("{}.w", self.prefix), glorot(rng, self.d_in, self.classes, vec![self.d_in, self.classes]));
        store.insert(format!("{}.b", self.prefix), Tensor::zeros(vec![self.classes]));
    }

    pub fn logits(&self, tape: &mut Tape, b: &Bindings, h: Var) -> Var {
        let z = tape.matmul(h, b.get(&format!("{}.w", self.prefix)));
        tape.add_row(z, b.get(&format!("{}.b", self.prefix)))
    }

    /// `[B, d_in]` to `[B, classes]` probabilities.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, h: Var) -> Var {
        let z = self.logits(tape, b, h);
        tape.softmax(z)
    }
}

/// Class probabilities for one hidden vector.
pub fn dense_softmax(h: &Tensor, head: &DenseSoftmax, params: &ParamStore) -> Result<Tensor, LayerError> {
    if h.len() != head.d_in {
        return Err(LayerError::Shape(format!("head input has {} values, expected {}", h.len(), head.d_in)));
    }
    param(params, &format!("{}.w", head.prefix))?;
    param(params, &format!("{}.b", head.prefix))?;
    let mut tape = Tape::new();
    let b = tape.bind_frozen(params);
    let x = tape.constant(h.clone().reshape(vec![1, head.d_in]));
    let p = head.forward(&mut tape, &b, x);
    Ok(tape.value(p).clone().reshape(vec![head.classes]))
}

/// Index of the largest entry; the lowest index wins exact ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodygraph::build_graph;
    use crate::numerics::{finite_difference_check, SeedStream};
    use proptest::prelude::*;

    fn single(c: usize, w: Tensor) -> (GcLayer, ParamStore) {
        let layer = GcLayer::new("gc", GcMode::Single, c, w.cols());
        let mut p = ParamStore::new();
        p.insert("gc.w", w);
        (layer, p)
    }

    #[test]
    fn isolated_node_with_identity_weight_is_identity() {
        let g = build_graph(&[1], &[]).unwrap();
        let (layer, p) = single(3, Tensor::identity(3));
        let x = Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]);
        assert_eq!(gc_forward(&x, &g, &layer, &p).unwrap(), x);
    }

    #[test]
    fn two_node_edge_averages() {
        let g = build_graph(&[1, 2], &[(1, 2)]).unwrap();
        let (layer, p) = single(3, Tensor::identity(3));
        let x = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let y = gc_forward(&x, &g, &layer, &p).unwrap();
        let want = [0.5, 0.5, 0.0, 0.5, 0.5, 0.0];
        assert!(y.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15), "{y:?}");
    }

    #[test]
    fn partitioned_form_on_a_path() {
        let g = build_graph(&[1, 2, 3], &[(1, 2), (2, 3)]).unwrap();
        let layer = GcLayer::new("gc", GcMode::Partitioned, 1, 1);
        let mut p = ParamStore::new();
        p.insert("gc.w_self", Tensor::matrix(1, 1, vec![2.0]));
        p.insert("gc.w_neighbor", Tensor::matrix(1, 1, vec![1.0]));
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]);
        let y = gc_forward(&x, &g, &layer, &p).unwrap();
        assert_eq!(y.data(), &[2.0 + 2.0, 4.0 + 2.5, 8.0 + 2.0]);
    }

    #[test]
    fn gc_rejects_wrong_rows() {
        let g = build_graph(&[1, 2], &[(1, 2)]).unwrap();
        let (layer, p) = single(3, Tensor::identity(3));
        let x = Tensor::matrix(3, 3, vec![0.0; 9]);
        assert!(matches!(gc_forward(&x, &g, &layer, &p), Err(LayerError::Shape(_))));
    }

    proptest! {
        #[test]
        fn gc_commutes_with_node_relabeling(seed in 0u64..1000, n in 2usize..9) {
            let mut rng = SeedStream::new(seed).rng();
            let ids: Vec<u32> = (1..=n as u32).collect();
            let edges: Vec<(u32, u32)> = (2..=n as u32).map(|i| (rng.random_range(1..i), i)).collect();
            let g = build_graph(&ids, &edges).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let pids: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
            let pg = build_graph(&pids, &edges).unwrap();
            for mode in [GcMode::Single, GcMode::Partitioned] {
                let layer = GcLayer::new("gc", mode, 3, 2);
                let mut p = ParamStore::new();
                layer.init(&mut p, &mut rng);
                let x = glorot(&mut rng, 1, 1, vec![n, 3]);
                let px = Tensor::matrix(n, 3, perm.iter().flat_map(|&i| x.row(i).to_vec()).collect());
                let y = gc_forward(&x, &g, &layer, &p).unwrap();
                let py = gc_forward(&px, &pg, &layer, &p).unwrap();
                for (r, &i) in perm.iter().enumerate() {
                    for c in 0..2 {
                        prop_assert!((py.at(r, c) - y.at(i, c)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_lstm_gives_zero_states() {
        let layer = LstmLayer::new("l", 4, 3);
        let mut p = ParamStore::new();
        p.insert("l.w_x", Tensor::zeros(vec![4, 12]));
        p.insert("l.w_h", Tensor::zeros(vec![3, 12]));
        p.insert("l.b", Tensor::zeros(vec![12]));
        let seq = Tensor::matrix(5, 4, (0..20).map(|i| i as f64).collect());
        let (all, last) = lstm_forward(&seq, &layer, &p).unwrap();
        assert!(all.data().iter().chain(last.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_cell_equations() {
        let layer = LstmLayer::new("l", 2, 2);
        let mut p = ParamStore::new();
        layer.init(&mut p, &mut SeedStream::new(4).rng());
        let x = [0.7, -0.3];
        let (_, last) = lstm_forward(&Tensor::matrix(1, 2, x.to_vec()), &layer, &p).unwrap();
        let (wx, b) = (p.get("l.w_x").unwrap(), p.get("l.b").unwrap());
        let pre = |k: usize| b.data()[k] + x[0] * wx.at(0, k) + x[1] * wx.at(1, k);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..2 {
            let c = sig(pre(j)) * pre(4 + j).tanh();
            let h = sig(pre(6 + j)) * c.tanh();
            assert!((last.data()[j] - h).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_gradient_of_final_hidden_sum() {
        let layer = LstmLayer::new("l", 4, 3);
        let mut p = ParamStore::new();
        let mut rng = SeedStream::new(9).rng();
        layer.init(&mut p, &mut rng);
        let seq = glorot(&mut rng, 1, 1, vec![5, 4]);
        for name in ["l.w_x", "l.w_h", "l.b"] {
            let err = finite_difference_check(&p, name, 1e-5, |t: &mut Tape, b: &Bindings| {
                let x = t.constant(seq.clone());
                let (_, last) = layer.forward(t, b, x, 1);
                t.sum(last)
            })
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let layer = LstmLayer::new("l", 2, 3);
        let mut p = ParamStore::new();
        layer.init(&mut p, &mut SeedStream::new(0).rng());
        assert_eq!(p.get("l.b").unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = SeedStream::new(1).rng();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1000, 1000], 1.0));
        assert_eq!(dropout(&mut tape, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut tape, x, 0.9, false, &mut rng).unwrap(), x);
        let y = dropout(&mut tape, x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).sum() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(dropout(&mut tape, x, 1.0, true, &mut rng), Err(LayerError::DropoutRate(1.0)));
    }

    fn head_with(w: Tensor, b: Tensor) -> (DenseSoftmax, ParamStore) {
        let head = DenseSoftmax::new("head", w.rows(), w.cols());
        let mut p = ParamStore::new();
        p.insert("head.w", w);
        p.insert("head.b", b);
        (head, p)
    }

    #[test]
    fn dense_softmax_cases() {
        let (head, p) = head_with(Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![2]));
        assert_eq!(dense_softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]), &head, &p).unwrap().data(), &[0.5, 0.5]);

        let (head, p) = head_with(Tensor::identity(2), Tensor::zeros(vec![2]));
        let q = dense_softmax(&Tensor::vector(vec![1000.0, 0.0]), &head, &p).unwrap();
        assert!(q.is_finite() && (q.data()[0] - 1.0).abs() < 1e-15 && q.data()[1] < 1e-300);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(z in prop::collection::vec(-20.0f64..20.0, 6), c in -50.0f64..50.0) {
            let (head, p) = head_with(Tensor::identity(6), Tensor::zeros(vec![6]));
            let a = dense_softmax(&Tensor::vector(z.clone()), &head, &p).unwrap();
            let b = dense_softmax(&Tensor::vector(z.iter().map(|v| v + c).collect()), &head, &p).unwrap();
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            prop_assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[0.25, 0.25, 0.5]), 2);
        assert_eq!(argmax(&[1.0 / 6.0; 6]), 0);
    }
}
