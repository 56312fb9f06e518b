//! Recurrent network, loss, dropout and optimizer.

pub mod dropout;
pub mod loss;
pub mod lstm;
pub mod optim;

pub use dropout::{dropout_masks, DropoutMasks, DropoutRates};
pub use loss::{bce_masked, sigmoid};
pub use lstm::{Dense, ForwardCache, Gate, LstmLayer, LstmStack, SequenceBatch};
pub use optim::{PlateauConfig, PlateauSchedule, RmsProp, RmsPropConfig, ScheduleEvent};

/// Flat views over a model's parameter blocks, in a fixed order.
pub trait Parameters {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for LstmStack {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.w_input.as_slice().expect("standard layout"));
            out.push(l.w_recurrent.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out.push(self.head.weights.as_slice().expect("standard layout"));
        out.push(self.head.bias.as_slice().expect("standard layout"));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.w_input.as_slice_mut().expect("standard layout"));
            out.push(l.w_recurrent.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.weights.as_slice_mut().expect("standard layout"));
        out.push(self.head.bias.as_slice_mut().expect("standard layout"));
        out
    }
}

/// Adds `λ·Σw²` over weight matrices (biases excluded) to the loss and
/// `2λw` to the gradient; returns the penalty.
pub fn apply_l2(model: &LstmStack, grads: &mut LstmStack, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut penalty = 0.0;
    let pairs = model
        .layers
        .iter()
        .zip(grads.layers.iter_mut())
        .flat_map(|(m, g)| {
            [
                (&m.w_input, &mut g.w_input),
                (&m.w_recurrent, &mut g.w_recurrent),
            ]
        });
    for (w, g) in pairs {
        penalty += w.iter().map(|v| v * v).sum::<f64>();
        g.scaled_add(2.0 * lambda, w);
    }
    penalty += model.head.weights.iter().map(|v| v * v).sum::<f64>();
    grads
        .head
        .weights
        .scaled_add(2.0 * lambda, &model.head.weights);
    lambda * penalty
}

/// Loss including the L2 penalty, for gradient checking and reporting.
pub fn penalized_loss(
    model: &LstmStack,
    batch: &SequenceBatch,
    labels: &ndarray::Array2<f64>,
    masks: Option<&DropoutMasks>,
    lambda: f64,
) -> crate::Result<f64> {
    let probs = model.forward(batch, masks)?.probs;
    let mut loss = bce_masked(&probs, labels)?;
    if lambda != 0.0 {
        let mut scratch = LstmStack::zeros(model.input_dim(), &model.hidden_sizes());
        loss += apply_l2(model, &mut scratch, lambda);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    /// Single LSTM cell, one step, scalar input and hidden size 1, worked by hand.
    #[test]
    fn single_cell_by_hand() {
        let mut m = LstmStack::zeros(1, &[1]);
        let l = &mut m.layers[0];
        // i, f, g, o
        l.w_input.assign(&array![[0.5], [-0.3], [0.8], [0.1]]);
        l.w_recurrent.assign(&array![[0.2], [0.4], [-0.6], [0.7]]);
        l.bias.assign(&array![0.1, 1.0, 0.0, -0.2]);
        m.head.weights[0] = 1.5;
        m.head.bias[0] = -0.25;

        let x = [2.0, -1.0];
        let (mut h, mut c) = (0.0f64, 0.0f64);
        let mut expect = Vec::new();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for &xt in &x {
            let i = sig(0.5 * xt + 0.2 * h + 0.1);
            let f = sig(-0.3 * xt + 0.4 * h + 1.0);
            let g = (0.8 * xt - 0.6 * h).tanh();
            let o = sig(0.1 * xt + 0.7 * h - 0.2);
            c = f * c + i * g;
            h = o * c.tanh();
            expect.push(sig(1.5 * h - 0.25));
        }
        let got = m.predict(&array![[2.0], [-1.0]]).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-14, "{g} vs {e}");
        }
    }

    fn grad_check(lambda: f64, with_masks: bool) {
        let model = LstmStack::init(5, 3, &[4, 4, 4], 1.0).unwrap();
        let a = Array2::from_shape_fn((6, 3), |(t, j)| ((t * 3 + j) as f64 * 0.7).sin());
        let b = Array2::from_shape_fn((4, 3), |(t, j)| ((t + 2 * j) as f64 * 0.4).cos());
        let batch = SequenceBatch::from_sequences(&[&a, &b]).unwrap();
        let labels = batch
            .pad_labels(&[
                &[f64::NAN, 0.0, 0.0, 1.0, 1.0, f64::NAN],
                &[f64::NAN, 1.0, f64::NAN, 0.0],
            ])
            .unwrap();
        let masks = with_masks.then(|| {
            dropout_masks(
                3,
                1,
                &[0, 1],
                &model.mask_shapes(),
                DropoutRates {
                    input: 0.35,
                    recurrent: 0.2,
                },
            )
            .unwrap()
        });
        let cache = model.forward(&batch, masks.as_ref()).unwrap();
        let mut grads = model.backward(&cache, &labels).unwrap();
        apply_l2(&model, &mut grads, lambda);

        let step = 1e-5;
        let analytic: Vec<f64> = grads.blocks().concat();
        let mut worst = 0.0f64;
        let mut idx = 0;
        let n_blocks = model.blocks().len();
        for blk in 0..n_blocks {
            let len = model.blocks()[blk].len();
            for k in 0..len {
                let mut plus = model.clone();
                plus.blocks_mut()[blk][k] += step;
                let mut minus = model.clone();
                minus.blocks_mut()[blk][k] -= step;
                let lp = penalized_loss(&plus, &batch, &labels, masks.as_ref(), lambda).unwrap();
                let lm = penalized_loss(&minus, &batch, &labels, masks.as_ref(), lambda).unwrap();
                let numeric = (lp - lm) / (2.0 * step);
                let a = analytic[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max((a - numeric).abs() / denom);
                idx += 1;
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        grad_check(0.0, false);
    }

    #[test]
    fn gradient_matches_with_dropout_and_l2() {
        grad_check(1e-2, true);
    }

    #[test]
    fn l2_excludes_biases() {
        let m = LstmStack::init(1, 2, &[3], 1.0).unwrap();
        let mut g = LstmStack::zeros(2, &[3]);
        apply_l2(&m, &mut g, 0.5);
        assert!(g.layers[0].bias.iter().all(|&v| v == 0.0));
        assert_eq!(g.head.bias[0], 0.0);
        assert_eq!(g.layers[0].w_input, &m.layers[0].w_input * 1.0);
    }
}
