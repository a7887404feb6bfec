//! Dense `f64` tensors, a reverse-mode tape, and the masked attention kernel.

pub mod attention;
pub mod fd;
pub mod graph;
pub mod optim;
pub mod serialize;
pub mod tensor;

pub use attention::{AttnMask, MASKED_LOGIT};
pub use fd::{finite_diff_gradient, max_relative_error};
pub use graph::{Bound, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use tensor::{ParamSet, Tensor};

use std::sync::Arc;

use crate::error::Result;

/// Stand-alone masked attention on plain tensors (no gradient recording).
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttnMask) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone())?,
        g.constant(k.clone())?,
        g.constant(v.clone())?,
    );
    let o = g.masked_attention(qv, kv, vv, &Arc::new(mask.clone()), None)?;
    Ok(g.value(o).clone())
}
