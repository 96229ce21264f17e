//! Parameterized building blocks. Each layer registers its tensors in a
//! [`ParamSet`] under a name prefix and applies them on a [`Graph`].

use rand::Rng;

use super::{kaiming_uniform, Graph, NnError, ParamId, ParamSet, Tensor, Var};

const GN_EPS: f32 = 1e-5;

/// Largest group count not above 8 that divides `channels` and leaves at
/// least two channels per group.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels / 2).max(1)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let w = ps.add(format!("{name}.w"), kaiming_uniform(vec![cout, cin, k, k], cin * k * k, rng))?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![cout]))?;
        Ok(Self { w, b, stride, pad })
    }

    /// Same-size 3x3 convolution.
    pub fn same3(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        Self::new(ps, name, cin, cout, 3, 1, 1, rng)
    }

    pub fn zero_init(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self, NnError> {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(vec![cout, cin, k, k]))?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![cout]))?;
        Ok(Self {
            w,
            b,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var, NnError> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gain: ParamId,
    bias: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Result<Self, NnError> {
        let gain = ps.add(format!("{name}.gain"), Tensor::ones(vec![channels]))?;
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(vec![channels]))?;
        Ok(Self {
            gain,
            bias,
            groups: default_groups(channels),
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var, NnError> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.group_norm(x, self.groups, gain, bias, GN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        let w = ps.add(format!("{name}.w"), kaiming_uniform(vec![dout, din], din, rng))?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![dout]))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var, NnError> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, w, b)
    }
}

/// `GN -> SiLU -> conv -> GN -> (+ time) -> SiLU -> conv` plus a skip path.
/// The time projection is added after the second norm; added before it, a
/// per-channel constant would be partly removed by the group mean.
/// The second convolution starts at zero so a fresh block is the identity
/// (or a 1x1 projection when the channel count changes).
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), cin)?;
        let conv1 = Conv2d::same3(ps, &format!("{name}.conv1"), cin, cout, rng)?;
        let time = match time_dim {
            Some(d) => Some(Linear::new(ps, &format!("{name}.time"), d, cout, rng)?),
            None => None,
        };
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), cout)?;
        let conv2 = Conv2d::zero_init(ps, &format!("{name}.conv2"), cout, cout, 3)?;
        let skip = if cin != cout {
            Some(Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)?)
        } else {
            None
        };
        Ok(Self {
            norm1,
            conv1,
            time,
            norm2,
            conv2,
            skip,
        })
    }

    /// `temb` is the shared `(N, time_dim)` embedding; required iff the block
    /// was built with a time projection.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var, temb: Option<Var>) -> Result<Var, NnError> {
        let h = self.norm1.forward(g, ps, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, ps, h)?;
        let mut h = self.norm2.forward(g, ps, h)?;
        match (&self.time, temb) {
            (Some(lin), Some(t)) => {
                let tv = lin.forward(g, ps, t)?;
                h = g.add_channel(h, tv)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(NnError::Shape("residual block needs a time embedding".into())),
            (None, Some(_)) => return Err(NnError::Shape("residual block has no time projection".into())),
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    ids: [ParamId; 5],
}

impl SelfAttention {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        let mut ids = Vec::with_capacity(5);
        for p in ["q", "k", "v"] {
            ids.push(ps.add(format!("{name}.w{p}"), kaiming_uniform(vec![channels, channels], channels, rng))?);
            if p != "k" {
                ids.push(ps.add(format!("{name}.b{p}"), Tensor::zeros(vec![channels]))?);
            }
        }
        Ok(Self {
            ids: ids.try_into().expect("five projection tensors"),
        })
    }

    fn vars(&self, g: &mut Graph, ps: &ParamSet) -> [Var; 5] {
        self.ids.map(|id| g.param(ps, id))
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var, NnError> {
        let w = self.vars(g, ps);
        g.self_attention(x, w)
    }

    pub fn attention_matrix(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Tensor, NnError> {
        let w = self.vars(g, ps);
        g.attention_matrix(x, w)
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `(N, dim)`.
/// The first half of the columns holds sines, the second half cosines, with
/// frequencies `10000^(-i / (dim/2))`.
pub fn timestep_embedding(ts: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; ts.len() * dim];
    for (row, &t) in out.chunks_exact_mut(dim).zip(ts) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            row[i] = a.sin() as f32;
            row[half + i] = a.cos() as f32;
        }
    }
    Tensor::new(vec![ts.len(), dim], out).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_choice_divides() {
        for c in 1..70 {
            let g = default_groups(c);
            assert_eq!(c % g, 0);
            assert!(g <= 8);
            assert!(c < 2 || c / g >= 2);
        }
        assert_eq!(default_groups(16), 8);
        assert_eq!(default_groups(12), 6);
        assert_eq!(default_groups(8), 4);
        assert_eq!(default_groups(1), 1);
    }

    #[test]
    fn fresh_resblock_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let rb = ResBlock::new(&mut ps, "rb", 4, 4, Some(8), &mut rng).unwrap();
        let x = Tensor::from_fn(vec![2, 4, 5, 5], |i| (i as f32 * 0.37).sin());
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let tv = g.input(timestep_embedding(&[3.0, 40.0], 8));
        let y = rb.forward(&mut g, &ps, xv, Some(tv)).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let e = timestep_embedding(&[1.0, 2.0], 16);
        assert_eq!(e.shape(), &[2, 16]);
        assert_ne!(&e.data()[..16], &e.data()[16..]);
        assert!((e.data()[0] - 1f32.sin()).abs() < 1e-7);
        assert!((e.data()[8] - 1f32.cos()).abs() < 1e-7);
    }

    #[test]
    fn names_are_prefixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        ResBlock::new(&mut ps, "down.0", 4, 8, None, &mut rng).unwrap();
        assert!(ps.id("down.0.skip.w").is_some());
        assert!(ps.id("down.0.conv2.b").is_some());
        assert!(ResBlock::new(&mut ps, "down.0", 4, 8, None, &mut rng).is_err());
    }
}
