//! Positional encoding and the coarse/fine radiance MLPs.
//!
//! Layout of one MLP with depth `D`, width `W` and skip layer `k`:
//!
//! ```text
//! γ(x) ─ L0 ─ relu ─ … ─ [concat γ(x)] ─ Lk ─ relu ─ … ─ L(D−1) ─ relu ─ h
//! σ   = softplus(h·Wσ + bσ)
//! rgb = sigmoid(relu([h·Wf + bf, γ(d)]·Wd + bd)·Wc + bc)
//! ```
//!
//! Density is read off before the direction encoding enters, so it does not
//! depend on `d` at all.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::camera::Vec3;
use crate::checkpoint::{Container, Section};
use crate::error::{Error, Result};

/// `[v, sin(2⁰πv), cos(2⁰πv), …, sin(2^{L−1}πv), cos(2^{L−1}πv)]`.
pub fn encode(v: Vec3, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(levels));
    encode_into(v, levels, &mut out);
    out
}

pub fn encode_into(v: Vec3, levels: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&v);
    let mut freq = std::f64::consts::PI;
    for _ in 0..levels {
        out.extend(v.iter().map(|x| (freq * x).sin()));
        out.extend(v.iter().map(|x| (freq * x).cos()));
        freq *= 2.0;
    }
}

pub fn encoded_len(levels: usize) -> usize {
    3 + 6 * levels
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    pub skip: usize,
    pub l_pos: usize,
    pub l_dir: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            skip: 2,
            l_pos: 10,
            l_dir: 4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width < 2 {
            return Err(Error::invalid("field depth must be >= 1 and width >= 2"));
        }
        if self.skip >= self.depth {
            return Err(Error::invalid("skip layer must be below depth"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let x_dim = encoded_len(self.l_pos);
        let d_dim = encoded_len(self.l_dir);
        let w = self.width;
        let mut dims = Vec::new();
        for i in 0..self.depth {
            let fan_in = match i {
                0 => x_dim,
                _ if i == self.skip && i > 0 => w + x_dim,
                _ => w,
            };
            dims.push((fan_in, w));
        }
        dims.push((w, 1)); // σ
        dims.push((w, w)); // feature
        dims.push((w + d_dim, w / 2)); // direction
        dims.push((w / 2, 3)); // rgb
        dims
    }
}

/// Weights of one MLP: `(W, b)` per layer in [`FieldConfig::layer_dims`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    config: FieldConfig,
    tensors: Vec<Tensor>,
}

impl Mlp {
    pub fn init(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let hidden = config.depth;
        let mut tensors = Vec::with_capacity(2 * dims.len());
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            // relu layers get the He gain; linear heads unit gain
            let relu_follows = i < hidden || i == hidden + 2;
            let gain = if relu_follows { 6.0 } else { 3.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.push(Tensor::new(&[fan_in, fan_out], w)?);
            tensors.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> FieldConfig {
        self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn from_tensors(config: FieldConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let ok = tensors.len() == 2 * dims.len()
            && dims
                .iter()
                .enumerate()
                .all(|(i, &(a, b))| tensors[2 * i].shape() == [a, b] && tensors[2 * i + 1].shape() == [b]);
        if !ok {
            return Err(Error::Checkpoint("tensor shapes do not match the field config".into()));
        }
        if tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("field weights"));
        }
        Ok(Self { config, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places the weights on `g`, tracked when gradients are wanted.
    pub fn bind<'g>(&self, g: &'g Graph, track: bool) -> Result<BoundMlp<'g>, AutodiffError> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if track {
                    g.param(t)
                } else {
                    g.constant(t.shape(), t.data().to_vec())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundMlp {
            config: self.config,
            vars,
        })
    }
}

/// An [`Mlp`] whose weights live on a graph.
pub struct BoundMlp<'g> {
    config: FieldConfig,
    pub vars: Vec<Var<'g>>,
}

pub struct FieldOutput<'g> {
    /// `[P, 3]` in (0, 1).
    pub rgb: Var<'g>,
    /// `[P, 1]`, nonnegative.
    pub sigma: Var<'g>,
}

impl<'g> BoundMlp<'g> {
    fn linear(&self, layer: usize, x: Var<'g>) -> Result<Var<'g>, AutodiffError> {
        x.affine(self.vars[2 * layer], self.vars[2 * layer + 1])
    }

    /// `x_enc` is `[P, 3+6·L_pos]`, `d_enc` is `[P, 3+6·L_dir]`.
    pub fn forward(&self, x_enc: Var<'g>, d_enc: Var<'g>) -> Result<FieldOutput<'g>, AutodiffError> {
        let g = x_enc.graph();
        let c = &self.config;
        let mut h = x_enc;
        for i in 0..c.depth {
            if i == c.skip && i > 0 {
                h = g.concat(&[h, x_enc], 1)?;
            }
            h = self.linear(i, h)?.relu()?;
        }
        let sigma = self.linear(c.depth, h)?.softplus()?;
        let feat = self.linear(c.depth + 1, h)?;
        let hd = self.linear(c.depth + 2, g.concat(&[feat, d_enc], 1)?)?.relu()?;
        let rgb = self.linear(c.depth + 3, hd)?.sigmoid()?;
        Ok(FieldOutput { rgb, sigma })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Coarse,
    Fine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub seed: u64,
    pub coarse: Mlp,
    pub fine: Mlp,
}

#[derive(Serialize, Deserialize)]
struct FieldMeta {
    config: FieldConfig,
    seed: u64,
}

pub const FIELD_SECTION: &str = "field";

impl FieldParams {
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse = Mlp::init(config, &mut rng)?;
        let fine = Mlp::init(config, &mut rng)?;
        Ok(Self { seed, coarse, fine })
    }

    pub fn config(&self) -> FieldConfig {
        self.coarse.config
    }

    pub fn mlp(&self, which: Which) -> &Mlp {
        match which {
            Which::Coarse => &self.coarse,
            Which::Fine => &self.fine,
        }
    }

    /// All weight tensors, coarse first.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.coarse.tensors.iter().chain(&self.fine.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.coarse.tensors.iter_mut().chain(self.fine.tensors.iter_mut())
    }

    pub fn to_section(&self) -> Section {
        Section {
            name: FIELD_SECTION.into(),
            meta: serde_json::to_value(FieldMeta {
                config: self.config(),
                seed: self.seed,
            })
            .expect("field metadata serializes"),
            tensors: self.tensors().cloned().collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let s = c
            .section(FIELD_SECTION)
            .ok_or_else(|| Error::Checkpoint("no field section".into()))?;
        let meta: FieldMeta =
            serde_json::from_value(s.meta.clone()).map_err(|e| Error::Checkpoint(format!("field metadata: {e}")))?;
        let half = s.tensors.len() / 2;
        let coarse = Mlp::from_tensors(meta.config, s.tensors[..half].to_vec())?;
        let fine = Mlp::from_tensors(meta.config, s.tensors[half..].to_vec())?;
        Ok(Self {
            seed: meta.seed,
            coarse,
            fine,
        })
    }
}

/// Evaluates one MLP at a single point.
pub fn query(params: &FieldParams, which: Which, x: Vec3, d: Vec3) -> Result<([f64; 3], f64)> {
    if x.iter().chain(&d).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("field query"));
    }
    let cfg = params.config();
    let g = Graph::new();
    let xe = g.constant(&[1, encoded_len(cfg.l_pos)], encode(x, cfg.l_pos))?;
    let de = g.constant(&[1, encoded_len(cfg.l_dir)], encode(d, cfg.l_dir))?;
    let out = params.mlp(which).bind(&g, false)?.forward(xe, de)?;
    let rgb = out.rgb.value()?;
    Ok(([rgb[0], rgb[1], rgb[2]], out.sigma.item()?))
}
