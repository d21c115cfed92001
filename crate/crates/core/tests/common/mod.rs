use wavescore_core::autodiff::{Graph, NormMode};
use wavescore_core::{Model, Tensor};

pub fn loss_and_grads(m: &Model<f64>, x: &Tensor<f64>, t: &Tensor<f64>, mode: NormMode) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), false).unwrap();
    let f = m.forward_graph(&mut g, xi, mode, true).unwrap();
    let ti = g.leaf(t.clone(), false).unwrap();
    let l = g.mse(f.output, ti).unwrap();
    let grads = g.backward(l).unwrap();
    let gs = f.params.iter().map(|&p| grads.get(p).unwrap().clone()).collect();
    (g.value(l).data()[0], gs)
}

/// Derivative of `f` at 0 by Richardson-extrapolated central differences.
/// ReLU networks are only piecewise smooth, and tiny steps drown in
/// roundoff. Several steps are tried; each is scored by how far its
/// estimate moves when the step halves (a kink inside the step) plus the
/// roundoff bound for that step, and the best-scoring estimate wins.
pub fn numeric_derivative(f: impl Fn(f64) -> f64) -> f64 {
    let central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let richardson = |h: f64| (4.0 * central(h / 2.0) - central(h)) / 3.0;
    let scale = f(0.0).abs().max(f64::MIN_POSITIVE);
    let mut best = (f64::INFINITY, 0.0);
    for i in 2..8 {
        let h = 10f64.powi(-i);
        let (a, b) = (richardson(h), richardson(h / 2.0));
        let score = (a - b).abs() + 16.0 * f64::EPSILON * scale / (h / 4.0);
        if score < best.0 {
            best = (score, b);
        }
    }
    best.1
}

/// Largest relative error between backprop and numeric gradients over every
/// parameter; the denominator is floored at `floor`.
pub fn worst_gradient_error(m: &Model<f64>, x: &Tensor<f64>, t: &Tensor<f64>, mode: NormMode, floor: f64) -> (f64, usize) {
    let (_, grads) = loss_and_grads(m, x, t, mode);
    let mut worst = 0.0f64;
    let mut count = 0;
    for (pi, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let fd = numeric_derivative(|h| {
                let mut p = m.clone();
                p.params_mut()[pi].data_mut()[k] += h;
                loss_and_grads(&p, x, t, mode).0
            });
            let a = g.data()[k];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(floor));
            count += 1;
        }
    }
    (worst, count)
}
