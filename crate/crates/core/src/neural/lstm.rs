//! Stacked LSTM with a per-step sigmoid head, batched over sequences.
//!
//! Gate blocks are stored stacked in the order input, forget, cell, output:
//! `w_input` is `4h × in`, `w_recurrent` is `4h × h`, `bias` is `4h`.
//! Activations for a batch are kept as `(T·B) × width` matrices where row
//! `t·B + b` holds step `t` of sequence `b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dropout::DropoutMasks;
use super::loss::{sigmoid, PROB_CLAMP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub w_input: Array2<f64>,
    pub w_recurrent: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Array2::zeros((4 * hidden, input)),
            w_recurrent: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.ncols()
    }

    /// Input and recurrent weight matrices of one gate (`h × in`, `h × h`).
    pub fn gate(&self, gate: Gate) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        let h = self.hidden();
        let rows = s![gate as usize * h..(gate as usize + 1) * h, ..];
        (self.w_input.slice(rows), self.w_recurrent.slice(rows))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
    pub head: Dense,
}

/// Padded batch of sequences; `inputs` is `T × B × in`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub inputs: Array3<f64>,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    /// Pads sequences (rows = steps) with zero rows to the longest length.
    pub fn from_sequences(seqs: &[&Array2<f64>]) -> Result<Self> {
        let width = seqs
            .first()
            .map(|s| s.ncols())
            .ok_or(Error::Empty("batch"))?;
        let steps = seqs.iter().map(|s| s.nrows()).max().unwrap_or(0);
        let mut inputs = Array3::zeros((steps, seqs.len(), width));
        for (b, seq) in seqs.iter().enumerate() {
            if seq.ncols() != width {
                return Err(Error::Shape(format!(
                    "sequence {b} has {} columns, expected {width}",
                    seq.ncols()
                )));
            }
            inputs.slice_mut(s![..seq.nrows(), b, ..]).assign(seq);
        }
        Ok(Self {
            inputs,
            lengths: seqs.iter().map(|s| s.nrows()).collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn size(&self) -> usize {
        self.inputs.dim().1
    }

    /// Labels padded with NaN to `T × B`.
    pub fn pad_labels(&self, labels: &[&[f64]]) -> Result<Array2<f64>> {
        let mut out = Array2::from_elem((self.steps(), self.size()), f64::NAN);
        for (b, l) in labels.iter().enumerate() {
            if l.len() != self.lengths[b] {
                return Err(Error::Shape(format!(
                    "sequence {b}: {} labels for {} steps",
                    l.len(),
                    self.lengths[b]
                )));
            }
            for (t, &y) in l.iter().enumerate() {
                out[[t, b]] = y;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Array2<f64>,
    hp: Array2<f64>,
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: usize,
    batch: usize,
    layers: Vec<LayerCache>,
    masks: Option<DropoutMasks>,
    logits: Array1<f64>,
    /// Probabilities as `T × B`.
    pub probs: Array2<f64>,
}

impl LstmStack {
    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input;
        for &h in hidden {
            layers.push(LstmLayer::zeros(prev, h));
            prev = h;
        }
        Self {
            layers,
            head: Dense {
                weights: Array1::zeros(prev),
                bias: Array1::zeros(1),
            },
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate.
    pub fn init(seed: u64, input: usize, hidden: &[usize], forget_bias: f64) -> Result<Self> {
        if input == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Shape(format!(
                "invalid dims input={input} hidden={hidden:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = Self::zeros(input, hidden);
        for layer in &mut stack.layers {
            let (h, n_in) = (layer.hidden(), layer.input_dim());
            fill_uniform(
                &mut layer.w_input,
                (6.0 / (n_in + 4 * h) as f64).sqrt(),
                &mut rng,
            );
            fill_uniform(
                &mut layer.w_recurrent,
                (6.0 / (5 * h) as f64).sqrt(),
                &mut rng,
            );
            layer.bias.slice_mut(s![h..2 * h]).fill(forget_bias);
        }
        let last = *hidden.last().unwrap();
        let limit = (6.0 / (last + 1) as f64).sqrt();
        stack
            .head
            .weights
            .mapv_inplace(|_| rng.random_range(-limit..limit));
        Ok(stack)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(LstmLayer::hidden).collect()
    }

    /// `(input, hidden)` per layer, the shapes dropout masks are drawn for.
    pub fn mask_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.input_dim(), l.hidden()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        super::Parameters::blocks(self)
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Forward pass; `masks = None` is evaluation mode.
    pub fn forward(
        &self,
        batch: &SequenceBatch,
        masks: Option<&DropoutMasks>,
    ) -> Result<ForwardCache> {
        let (steps, size, width) = batch.inputs.dim();
        if width != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {width} columns, model expects {}",
                self.input_dim()
            )));
        }
        if batch.inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        if let Some(m) = masks {
            m.check(size, &self.mask_shapes())?;
        }
        let tb = steps * size;
        let mut input = batch
            .inputs
            .to_shape((tb, width))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let m = masks.map(|m| (&m.input[l], &m.recurrent[l]));
            let cache = layer_forward(layer, input, steps, size, m);
            input = cache.h.clone();
            layers.push(cache);
        }
        let top = &layers.last().unwrap().h;
        let logits = top.dot(&self.head.weights) + self.head.bias[0];
        let probs = logits
            .mapv(sigmoid)
            .into_shape_with_order((steps, size))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(ForwardCache {
            steps,
            batch: size,
            layers,
            masks: masks.cloned(),
            logits,
            probs,
        })
    }

    /// Evaluation-mode probabilities for one sequence (rows = steps).
    pub fn predict(&self, seq: &Array2<f64>) -> Result<Vec<f64>> {
        if seq.nrows() == 0 {
            return Ok(Vec::new());
        }
        let batch = SequenceBatch::from_sequences(&[seq])?;
        Ok(self.forward(&batch, None)?.probs.column(0).to_vec())
    }

    /// Gradient of the masked mean BCE with respect to every parameter.
    /// `labels` is `T × B`; NaN entries carry no loss.
    pub fn backward(&self, cache: &ForwardCache, labels: &Array2<f64>) -> Result<LstmStack> {
        let (steps, size) = (cache.steps, cache.batch);
        if labels.dim() != (steps, size) {
            return Err(Error::Shape(format!(
                "labels {:?} for outputs {:?}",
                labels.dim(),
                (steps, size)
            )));
        }
        let n = labels.iter().filter(|y| !y.is_nan()).count();
        if n == 0 {
            return Err(Error::NoLabels);
        }
        let flat_labels = labels.iter().copied().collect::<Vec<_>>();
        let p_flat = cache.logits.mapv(sigmoid);
        let dlogit = Array1::from_iter(p_flat.iter().zip(&flat_labels).map(|(&p, &y)| {
            if y.is_nan() || !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                (p - y) / n as f64
            }
        }));

        let mut grads = LstmStack::zeros(self.input_dim(), &self.hidden_sizes());
        let top = &cache.layers.last().unwrap().h;
        grads.head.weights = top.t().dot(&dlogit);
        grads.head.bias[0] = dlogit.sum();
        let mut dh = outer(&dlogit, &self.head.weights);

        for l in (0..self.layers.len()).rev() {
            let m = cache.masks.as_ref().map(|m| (&m.input[l], &m.recurrent[l]));
            dh = layer_backward(
                &self.layers[l],
                &cache.layers[l],
                dh,
                steps,
                size,
                m,
                &mut grads.layers[l],
            );
        }
        Ok(grads)
    }
}

fn fill_uniform(a: &mut Array2<f64>, limit: f64, rng: &mut ChaCha8Rng) {
    a.mapv_inplace(|_| rng.random_range(-limit..limit));
}

fn outer(col: &Array1<f64>, row: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((col.len(), row.len()));
    Zip::from(out.rows_mut())
        .and(col)
        .for_each(|mut r, &c| r.assign(&(row * c)));
    out
}

fn mask_rows(x: &mut Array2<f64>, mask: &Array2<f64>, steps: usize, size: usize) {
    for t in 0..steps {
        let mut block = x.slice_mut(s![t * size..(t + 1) * size, ..]);
        block *= mask;
    }
}

fn layer_forward(
    layer: &LstmLayer,
    mut x: Array2<f64>,
    steps: usize,
    size: usize,
    masks: Option<(&Array2<f64>, &Array2<f64>)>,
) -> LayerCache {
    let h = layer.hidden();
    let tb = steps * size;
    if let Some((m_in, _)) = masks {
        mask_rows(&mut x, m_in, steps, size);
    }
    let mut gates = Array2::<f64>::zeros((tb, 4 * h));
    general_mat_mul(1.0, &x, &layer.w_input.t(), 0.0, &mut gates);
    gates += &layer.bias;

    let mut hp = Array2::<f64>::zeros((tb, h));
    let mut c = Array2::<f64>::zeros((tb, h));
    let mut tanh_c = Array2::<f64>::zeros((tb, h));
    let mut out = Array2::<f64>::zeros((tb, h));
    let mut h_prev = Array2::<f64>::zeros((size, h));
    let mut c_prev = Array2::<f64>::zeros((size, h));

    for t in 0..steps {
        let rows = s![t * size..(t + 1) * size, ..];
        if let Some((_, m_rec)) = masks {
            h_prev *= m_rec;
        }
        hp.slice_mut(rows).assign(&h_prev);
        let mut a = gates.slice_mut(rows);
        general_mat_mul(1.0, &h_prev, &layer.w_recurrent.t(), 1.0, &mut a);
        for b in 0..size {
            for j in 0..h {
                let i = sigmoid(a[[b, j]]);
                let f = sigmoid(a[[b, h + j]]);
                let g = a[[b, 2 * h + j]].tanh();
                let o = sigmoid(a[[b, 3 * h + j]]);
                a[[b, j]] = i;
                a[[b, h + j]] = f;
                a[[b, 2 * h + j]] = g;
                a[[b, 3 * h + j]] = o;
                let cell = f * c_prev[[b, j]] + i * g;
                let tc = cell.tanh();
                c_prev[[b, j]] = cell;
                h_prev[[b, j]] = o * tc;
            }
        }
        c.slice_mut(rows).assign(&c_prev);
        out.slice_mut(rows).assign(&h_prev);
        let tc = c_prev.mapv(f64::tanh);
        tanh_c.slice_mut(rows).assign(&tc);
    }
    LayerCache {
        x,
        hp,
        gates,
        c,
        tanh_c,
        h: out,
    }
}

/// Backpropagates `dh_out` (gradient w.r.t. this layer's outputs) through
/// time, accumulates parameter gradients into `grad`, and returns the
/// gradient with respect to the layer input.
fn layer_backward(
    layer: &LstmLayer,
    cache: &LayerCache,
    dh_out: Array2<f64>,
    steps: usize,
    size: usize,
    masks: Option<(&Array2<f64>, &Array2<f64>)>,
    grad: &mut LstmLayer,
) -> Array2<f64> {
    let h = layer.hidden();
    let tb = steps * size;
    let mut da = Array2::<f64>::zeros((tb, 4 * h));
    let mut dh_rec = Array2::<f64>::zeros((size, h));
    let mut dc_next = Array2::<f64>::zeros((size, h));
    let mut dhp = Array2::<f64>::zeros((size, h));

    for t in (0..steps).rev() {
        let rows = s![t * size..(t + 1) * size, ..];
        let g = cache.gates.slice(rows);
        let tc = cache.tanh_c.slice(rows);
        let dho = dh_out.slice(rows);
        let mut dat = da.slice_mut(rows);
        for b in 0..size {
            for j in 0..h {
                let (i, f, gg, o) = (
                    g[[b, j]],
                    g[[b, h + j]],
                    g[[b, 2 * h + j]],
                    g[[b, 3 * h + j]],
                );
                let c_prev = if t == 0 {
                    0.0
                } else {
                    cache.c[[(t - 1) * size + b, j]]
                };
                let dh = dho[[b, j]] + dh_rec[[b, j]];
                let tcv = tc[[b, j]];
                let d_o = dh * tcv;
                let dc = dh * o * (1.0 - tcv * tcv) + dc_next[[b, j]];
                dc_next[[b, j]] = dc * f;
                dat[[b, j]] = dc * gg * i * (1.0 - i);
                dat[[b, h + j]] = dc * c_prev * f * (1.0 - f);
                dat[[b, 2 * h + j]] = dc * i * (1.0 - gg * gg);
                dat[[b, 3 * h + j]] = d_o * o * (1.0 - o);
            }
        }
        general_mat_mul(1.0, &dat, &layer.w_recurrent, 0.0, &mut dhp);
        dh_rec.assign(&dhp);
        if let Some((_, m_rec)) = masks {
            dh_rec *= m_rec;
        }
    }
    general_mat_mul(1.0, &da.t(), &cache.hp, 1.0, &mut grad.w_recurrent);
    general_mat_mul(1.0, &da.t(), &cache.x, 1.0, &mut grad.w_input);
    grad.bias += &da.sum_axis(Axis(0));
    let mut dx = da.dot(&layer.w_input);
    if let Some((m_in, _)) = masks {
        mask_rows(&mut dx, m_in, steps, size);
    }
    dx
}
