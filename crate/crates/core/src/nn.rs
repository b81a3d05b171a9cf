//! Layer building blocks shared by the ray autoencoder and the predictor.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{kaiming_uniform, Bound, Graph, ParamId, ParamStore, Tensor, Var};

/// Convolution with spectrally normalized weight `[cout, cin, taps..]`.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    rank: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, taps: &[usize], gain: f32) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(taps);
        let fan_in = cin * taps.iter().product::<usize>();
        let w = kaiming_uniform(rng, &shape, fan_in, gain);
        let w = store.add(&format!("{name}.w"), w, Some(rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[cout]), None);
        Self { w, b, rank: taps.len() }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self.rank {
            1 => g.conv1d(x, p.get(self.w), p.get(self.b)),
            _ => g.conv3d(x, p.get(self.w), p.get(self.b)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Resample {
    Down,
    Up,
}

/// Residual block: two conv-norm-relu stages with a resampled identity
/// branch. Down blocks pool after the convolutions; up blocks up-sample
/// before them. A 1-tap convolution matches channels on the skip path.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    c1: Conv,
    c2: Conv,
    skip: Option<Conv>,
    mode: Resample,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, taps: &[usize], mode: Resample) -> Self {
        let c1 = Conv::new(store, rng, &format!("{name}.c1"), cout, cin, taps, 1.0);
        let c2 = Conv::new(store, rng, &format!("{name}.c2"), cout, cout, taps, 1.0);
        let skip = (cin != cout).then(|| {
            let ones = vec![1; taps.len()];
            Conv::new(store, rng, &format!("{name}.skip"), cout, cin, &ones, 1.0)
        });
        Self { c1, c2, skip, mode }
    }

    /// `axes` are resampled by 2; `spatial` is the number of trailing
    /// spatial axes used by instance normalization.
    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var, axes: &[usize], spatial: usize) -> Result<Var> {
        let x = match self.mode {
            Resample::Up => g.upsample(x, axes, 2)?,
            Resample::Down => x,
        };
        let mut h = self.c1.apply(g, p, x)?;
        h = g.instance_norm(h, spatial)?;
        h = g.relu(h);
        h = self.c2.apply(g, p, h)?;
        h = g.instance_norm(h, spatial)?;
        h = g.relu(h);
        let mut s = x;
        if self.mode == Resample::Down {
            h = g.avg_pool(h, axes, 2)?;
            s = g.avg_pool(s, axes, 2)?;
        }
        if let Some(c) = &self.skip {
            s = c.apply(g, p, s)?;
        }
        g.add(h, s)
    }
}
