//! One-hidden-layer softmax classifier with hand-written backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::PredictionMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs x outputs`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
        }
    }

    /// Draws one output column at a time, so widening the layer leaves the
    /// leading columns unchanged.
    fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / inputs.max(1) as f64).sqrt();
        let mut w = Array2::zeros((inputs, outputs));
        for mut col in w.columns_mut() {
            for v in col.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * scale;
            }
        }
        Self {
            w,
            b: Array1::zeros(outputs),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// `d -> tanh(h) -> classes`, or plain softmax regression when `hidden` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

impl ClassifierParams {
    /// Zero weights everywhere; predictions are uniform.
    pub fn zeros(d: usize, hidden: usize, classes: usize) -> Self {
        if hidden == 0 {
            Self {
                hidden: None,
                output: Dense::zeros(d, classes),
            }
        } else {
            Self {
                hidden: Some(Dense::zeros(d, hidden)),
                output: Dense::zeros(hidden, classes),
            }
        }
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init(d: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        if hidden == 0 {
            Self {
                hidden: None,
                output: Dense::random(d, classes, rng),
            }
        } else {
            let h = Dense::random(d, hidden, rng);
            Self {
                hidden: Some(h),
                output: Dense::random(hidden, classes, rng),
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).w.nrows()
    }

    pub fn classes(&self) -> usize {
        self.output.b.len()
    }

    /// Parameter tensors in a fixed order: hidden `w`, hidden `b`, output `w`, output `b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4);
        for layer in self.hidden.iter().chain(std::iter::once(&self.output)) {
            out.push(layer.w.as_slice().expect("standard layout"));
            out.push(layer.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4);
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            out.push(layer.w.as_slice_mut().expect("standard layout"));
            out.push(layer.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature dim vs model input",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    fn logits_with_hidden(&self, x: ArrayView2<'_, f64>) -> (Option<Array2<f64>>, Array2<f64>) {
        match &self.hidden {
            Some(h) => {
                let a = h.apply(x).mapv(f64::tanh);
                let z = self.output.apply(a.view());
                (Some(a), z)
            }
            None => (None, self.output.apply(x)),
        }
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.logits_with_hidden(x).1)
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    z
}

/// Row-stochastic class posteriors for each feature row.
pub fn forward(params: &ClassifierParams, x: ArrayView2<'_, f64>) -> Result<PredictionMatrix> {
    PredictionMatrix::new(softmax_rows(params.logits(x)?))
}

/// Mean cross-entropy of `labels` under the model, times `scale`, and its gradient.
pub fn loss_and_grad(
    params: &ClassifierParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    scale: f64,
) -> Result<(f64, ClassifierParams)> {
    params.check_input(x)?;
    if x.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "batch rows vs labels",
            expected: x.nrows(),
            actual: labels.len(),
        });
    }
    let classes = params.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::ClassOutOfRange { class: bad, total: classes });
    }
    let n = labels.len();
    let mut grad = ClassifierParams::zeros(params.input_dim(), params.hidden.as_ref().map_or(0, |h| h.b.len()), classes);
    if n == 0 {
        return Ok((0.0, grad));
    }

    let (hidden, z) = params.logits_with_hidden(x);
    let mut delta = softmax_rows(z.clone());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        delta[[i, y]] -= 1.0;
    }
    let factor = scale / n as f64;
    delta.mapv_inplace(|v| v * factor);

    let out_input = hidden.as_ref().map_or(x, |a| a.view());
    grad.output.w = out_input.t().dot(&delta);
    grad.output.b = delta.sum_axis(Axis(0));
    if let (Some(layer), Some(a)) = (&params.hidden, &hidden) {
        let mut back = delta.dot(&params.output.w.t());
        back.zip_mut_with(a, |g, &act| *g *= 1.0 - act * act);
        let g = grad.hidden.as_mut().expect("shapes match params");
        g.w = x.t().dot(&back);
        g.b = back.sum_axis(Axis(0));
        debug_assert_eq!(g.w.dim(), layer.w.dim());
    }
    Ok((loss * factor, grad))
}

/// Fraction of rows whose ID-restricted prediction equals the label.
pub fn accuracy(params: &ClassifierParams, x: ArrayView2<'_, f64>, labels: &[usize], k_id: usize) -> Result<f64> {
    if labels.is_empty() {
        return Ok(f64::NAN);
    }
    let z = params.logits(x)?;
    let correct = z
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| crate::label_space::argmax(row.iter().take(k_id).copied()) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
