//! Central finite-difference oracle for reverse-mode gradients, with one
//! Richardson step (steps h and h/2) to cancel the O(h²) truncation term.
//!
//! The scalar under test is `Σ rᵢ·outᵢ` with fixed random cotangents `r`,
//! accumulated in f64 outside the graph so rounding in the reduction does
//! not pollute the difference quotient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vdl_surrogate::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f32 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Like [`random_tensor`] but every magnitude is at least `gap`, so a step of
/// [`FD_STEP`] never crosses a ReLU kink.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0f32);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn weighted_sum(out: &Tensor, r: &[f32]) -> f64 {
    out.data().iter().zip(r).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Returns the norm-wise relative error `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖)`
/// over the gradients of all `inputs`.
pub fn gradcheck<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &leaves);
        (g, leaves, out)
    };
    let (g, leaves, out) = eval(inputs);
    let out_shape = g.value(out).shape().to_vec();
    let r: Vec<f32> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let grads = g.backward_with(out, Tensor::new(out_shape, r.clone()).unwrap());

    let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic: Vec<f32> = grads
            .get(*leaf)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let central = |h: f32| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                (weighted_sum(gp.value(op), &r) - weighted_sum(gm.value(om), &r)) / (2.0 * h as f64)
            };
            let fd = (4.0 * central(FD_STEP / 2.0) - central(FD_STEP)) / 3.0;
            let a = analytic[i] as f64;
            diff += (a - fd).powi(2);
            na += a * a;
            nf += fd * fd;
        }
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-12)
}
