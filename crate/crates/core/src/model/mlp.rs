use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::dit::time_features;
use crate::numerics::{Bound, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
    pub time_freqs: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            dim: 1,
            hidden: 64,
            time_freqs: 4,
        }
    }
}

/// Velocity field `u(x, t)` for low-dimensional flow-matching experiments:
/// two SiLU hidden layers over `[x, sinusoid(t)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityMlp {
    pub config: MlpConfig,
    pub params: ParamSet,
}

impl VelocityMlp {
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 || config.time_freqs == 0 {
            return Err(Error::Configuration(format!("bad mlp config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = config.dim + 2 * config.time_freqs;
        let h = config.hidden;
        let mut p = ParamSet::new();
        p.insert("w1", Tensor::randn(&[i, h], 1.0 / (i as f64).sqrt(), &mut rng))?;
        p.insert("b1", Tensor::zeros(&[h]))?;
        p.insert("w2", Tensor::randn(&[h, h], 1.0 / (h as f64).sqrt(), &mut rng))?;
        p.insert("b2", Tensor::zeros(&[h]))?;
        p.insert("w3", Tensor::randn(&[h, config.dim], 1.0 / (h as f64).sqrt(), &mut rng))?;
        p.insert("b3", Tensor::zeros(&[config.dim]))?;
        Ok(VelocityMlp { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        let c = &self.config;
        let i = c.dim + 2 * c.time_freqs;
        i * c.hidden + c.hidden + c.hidden * c.hidden + c.hidden + c.hidden * c.dim + c.dim
    }

    /// `x` is `[N, dim]`; `t` holds one timestep per row.
    pub fn graph(&self, g: &mut Graph, p: &Bound, x: Var, t: &[f64]) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.config.dim || xs[0] != t.len() {
            return Err(Error::dim(format!(
                "mlp input {xs:?} with {} timesteps",
                t.len()
            )));
        }
        let nf = 2 * self.config.time_freqs;
        let mut feats = Vec::with_capacity(t.len() * nf);
        for &ti in t {
            feats.extend_from_slice(time_features(ti, self.config.time_freqs).data());
        }
        let f = g.constant(Tensor::new(vec![t.len(), nf], feats)?)?;
        let inp = g.concat(&[x, f], 1)?;
        let h = g.linear(inp, p.get("w1")?, Some(p.get("b1")?))?;
        let h = g.silu(h)?;
        let h = g.linear(h, p.get("w2")?, Some(p.get("b2")?))?;
        let h = g.silu(h)?;
        g.linear(h, p.get("w3")?, Some(p.get("b3")?))
    }

    pub fn velocity(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params)?;
        let xv = g.constant(x.clone())?;
        let v = self.graph(&mut g, &p, xv, t)?;
        Ok(g.value(v).clone())
    }
}
