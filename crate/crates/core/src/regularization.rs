//! Stochastic shared embeddings (SSE-SE) and weight decay on embedding tables.

use rand::Rng;

use crate::dataio::PAD;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamKind};
use crate::tensor::Tensor;

/// Replacement probabilities: `p_user` governs the input and output user
/// lookups jointly, `p_input_item` the input items, `p_output_item` the target
/// and negative items.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SseConfig {
    pub p_user: f64,
    pub p_input_item: f64,
    pub p_output_item: f64,
}

impl SseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_u", self.p_user),
            ("p_i", self.p_input_item),
            ("p_y", self.p_output_item),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Contract(format!("SSE probability {name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.p_user == 0.0 && self.p_input_item == 0.0 && self.p_output_item == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecayConfig {
    pub lambda: f64,
}

/// With probability `p`, swap `index` for one drawn uniformly from
/// `1..=table_size` (possibly itself). `p = 0` never touches the RNG.
pub fn sse_replace<R: Rng + ?Sized>(index: usize, table_size: usize, p: f64, rng: &mut R) -> Result<usize> {
    sse_replace_traced(index, table_size, p, rng).map(|(i, _)| i)
}

/// [`sse_replace`] that also reports whether the replacement decision fired.
pub fn sse_replace_traced<R: Rng + ?Sized>(
    index: usize,
    table_size: usize,
    p: f64,
    rng: &mut R,
) -> Result<(usize, bool)> {
    if index == PAD || index > table_size {
        return Err(Error::Contract(format!(
            "SSE index {index} outside 1..={table_size}"
        )));
    }
    if p > 0.0 && rng.gen::<f64>() < p {
        Ok((rng.gen_range(1..=table_size), true))
    } else {
        Ok((index, false))
    }
}

/// Index view of one training example. A single `user` field feeds both the
/// input embedding and the prediction layer, so one replacement decision
/// covers both lookups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SseExample {
    pub user: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Applies SSE-SE in place. Padding entries are never replaced; neither is the
/// padding user.
pub fn sse_apply_batch<R: Rng + ?Sized>(
    batch: &mut [SseExample],
    cfg: &SseConfig,
    n_users: usize,
    n_items: usize,
    rng: &mut R,
) -> Result<()> {
    if cfg.is_disabled() {
        return Ok(());
    }
    for ex in batch.iter_mut() {
        if ex.user != PAD {
            ex.user = sse_replace(ex.user, n_users, cfg.p_user, rng)?;
        }
        for i in ex.inputs.iter_mut().filter(|i| **i != PAD) {
            *i = sse_replace(*i, n_items, cfg.p_input_item, rng)?;
        }
        for i in ex.targets.iter_mut().chain(ex.negatives.iter_mut()).filter(|i| **i != PAD) {
            *i = sse_replace(*i, n_items, cfg.p_output_item, rng)?;
        }
    }
    Ok(())
}

/// Rows of the embedding tables referenced by the current batch.
#[derive(Debug, Clone, Default)]
pub struct TouchedRows {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

impl TouchedRows {
    pub fn from_examples(batch: &[SseExample]) -> Self {
        let mut users: Vec<usize> = batch.iter().map(|e| e.user).collect();
        let mut items: Vec<usize> = batch
            .iter()
            .flat_map(|e| e.inputs.iter().chain(&e.targets).chain(&e.negatives).copied())
            .collect();
        for v in [&mut users, &mut items] {
            v.retain(|&i| i != PAD);
            v.sort_unstable();
            v.dedup();
        }
        TouchedRows { users, items }
    }
}

/// Adds `λ·θ` to the gradient rows of the user and item tables touched by the
/// batch (never the padding row) and to every row of the position table.
/// Dense block weights are not decayed. `grads` is aligned with
/// [`ModelParams::tensors`].
pub fn weight_decay_grads(params: &ModelParams, grads: &mut [Tensor], touched: &TouchedRows, cfg: &DecayConfig) {
    if cfg.lambda == 0.0 {
        return;
    }
    let lambda = cfg.lambda;
    for ((param, grad), kind) in params.tensors().into_iter().zip(grads.iter_mut()).zip(params.kinds()) {
        let rows: Box<dyn Iterator<Item = usize>> = match kind {
            ParamKind::UserTable => Box::new(touched.users.iter().copied()),
            ParamKind::ItemTable => Box::new(touched.items.iter().copied()),
            ParamKind::PositionTable => Box::new(0..param.rows()),
            ParamKind::Dense => continue,
        };
        for r in rows {
            for (g, w) in grad.row_mut(r).iter_mut().zip(param.row(r)) {
                *g += lambda * w;
            }
        }
    }
}
