#![allow(dead_code)]

use viraal_core::corpus::Encoded;
use viraal_core::model::{Batch, ModelDims, ModelParams, NluModel};
use viraal_core::tape::Mat;

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab_size: 6,
        embedding_size: 3,
        hidden_size: 2,
        slot_embedding_size: 2,
        attention_size: 2,
        num_intents: 2,
        num_slots: 3,
    }
}

pub fn tiny_model(seed: u64) -> (NluModel, ModelParams) {
    let model = NluModel::new(tiny_dims());
    let params = model.init_params(None, seed).unwrap();
    (model, params)
}

pub fn encoded(id: usize, words: &[usize], labeled: bool) -> Encoded {
    Encoded {
        id,
        words: words.to_vec(),
        intent: labeled.then_some(id % 2),
        slots: labeled.then(|| words.iter().map(|w| (w + id) % 3).collect()),
    }
}

/// Three examples of lengths 2, 4 and 1, so two rows carry padding.
pub fn padded_batch(labeled: bool) -> Batch {
    Batch::new(&[
        encoded(0, &[2, 3], labeled),
        encoded(1, &[4, 5, 3, 2], labeled),
        encoded(2, &[1], labeled),
    ])
    .unwrap()
}

/// Mixed batch: rows 0 and 2 labeled, row 1 not.
pub fn mixed_batch() -> Batch {
    Batch::new(&[encoded(0, &[2, 3, 4], true), encoded(1, &[5, 2], false), encoded(2, &[3], true)]).unwrap()
}

/// Central finite differences of `f` with respect to every parameter scalar.
pub fn numeric_param_grads(params: &ModelParams, h: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<Mat> {
    let mut p = params.clone();
    let mut out = Vec::with_capacity(params.tensors.len());
    for i in 0..params.tensors.len() {
        let mut g = Mat::zeros(params.tensors[i].dim());
        for idx in ndarray::indices(params.tensors[i].dim()) {
            let orig = p.tensors[i][idx];
            p.tensors[i][idx] = orig + h;
            let up = f(&p);
            p.tensors[i][idx] = orig - h;
            let down = f(&p);
            p.tensors[i][idx] = orig;
            g[idx] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Central finite differences of `f` with respect to each entry of `x`.
pub fn numeric_grad(x: &Mat, h: f64, f: impl Fn(&Mat) -> f64) -> Mat {
    let mut x = x.clone();
    let mut g = Mat::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let orig = x[idx];
        x[idx] = orig + h;
        let up = f(&x);
        x[idx] = orig - h;
        let down = f(&x);
        x[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over all tensors; missing analytic gradients count as zero.
pub fn relative_error(analytic: &[Option<Mat>], numeric: &[Mat]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (a, n) in analytic.iter().zip(numeric) {
        let a = a.clone().unwrap_or_else(|| Mat::zeros(n.dim()));
        diff += (&a - n).mapv(|x| x * x).sum();
        na += a.mapv(|x| x * x).sum();
        nn += n.mapv(|x| x * x).sum();
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

pub fn mat_relative_error(a: &Mat, n: &Mat) -> f64 {
    relative_error(&[Some(a.clone())], std::slice::from_ref(n))
}
