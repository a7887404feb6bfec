//! Central finite differences, used as an independent gradient oracle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParamSet, Tensor};

/// Central-difference gradient of a scalar function of `params`.
///
/// The step for coordinate `p` is `eps * max(1, |p|)`. `f` is evaluated
/// twice at the unperturbed point first; differing values mean `f` is not
/// deterministic and the oracle is rejected.
pub fn finite_diff_gradient<F>(f: F, params: &ParamSet, eps: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let base_a = f(params)?;
    let base_b = f(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {base_a} vs {base_b}"
        )));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.len();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = work.get(&name)?.data()[i];
            let h = eps * orig.abs().max(1.0);
            work.get_mut(&name)?.data_mut()[i] = orig + h;
            let up = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - h;
            let down = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), Tensor::new(params.get(&name)?.shape().to_vec(), g)?);
    }
    Ok(out)
}

/// Largest relative disagreement between two gradient maps.
///
/// Per coordinate: `|a - b| / max(|a|, |b|, floor)` with
/// `floor = 1e-3 * max_abs(b) + 1e-8`, so coordinates whose true gradient is
/// orders of magnitude below the largest one are judged on an absolute scale.
pub fn max_relative_error(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> Result<f64> {
    let scale = b
        .values()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-8;
    let mut worst = 0.0f64;
    for (name, ta) in a {
        let tb = b
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient `{name}` missing from reference")))?;
        ta.same_shape(tb, name)?;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}
