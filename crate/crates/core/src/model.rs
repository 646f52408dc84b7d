//! The personalized transformer: concatenated item/user input embeddings plus
//! learned positions, a stack of causal self-attention blocks, and a prediction
//! layer that reuses the input embedding tables.
//!
//! Every sublayer is wired pre-norm, `x + dropout(sublayer(layer_norm(x)))`,
//! and the stack ends with one more layer norm.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// User embedding width; `0` gives the un-personalized model.
    pub d_user: usize,
    pub d_item: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.d_user + self.d_item
    }

    pub fn personalized(&self) -> bool {
        self.d_user > 0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.n_items == 0 {
            return fail("model needs at least one item".into());
        }
        if self.d_item == 0 {
            return fail("item embedding width must be ≥ 1".into());
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be ≥ 2, got {}", self.max_len));
        }
        if self.blocks == 0 {
            return fail("at least one attention block is required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub ffn_norm_gain: Tensor,
    pub ffn_norm_bias: Tensor,
}

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 11] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 11] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
        ]
    }

    const NAMES: [&'static str; 11] = [
        "w_q",
        "w_k",
        "w_v",
        "ffn_w1",
        "ffn_b1",
        "ffn_w2",
        "ffn_b2",
        "attn_norm_gain",
        "attn_norm_bias",
        "ffn_norm_gain",
        "ffn_norm_bias",
    ];
}

/// All learnable arrays. Row 0 of the user and item tables is the padding row.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub user: Option<Tensor>,
    pub item: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
}

/// Which logical group a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    UserTable,
    ItemTable,
    PositionTable,
    Dense,
}

impl ModelParams {
    /// Uniform `[−1/√d, 1/√d]` for matrices and tables, zero biases, unit gains.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (cfg.width() as f64).sqrt();
        Self::build(cfg, |shape| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        })
    }

    /// Correctly shaped parameters with zero weights (gains still one).
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, Tensor::zeros)
    }

    fn build(cfg: &ModelConfig, mut weights: impl FnMut(&[usize]) -> Result<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width();
        let user = if cfg.personalized() {
            Some(weights(&[cfg.n_users + 1, cfg.d_user])?)
        } else {
            None
        };
        let item = weights(&[cfg.n_items + 1, cfg.d_item])?;
        let pos = weights(&[cfg.max_len, d])?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(BlockParams {
                w_q: weights(&[d, d])?,
                w_k: weights(&[d, d])?,
                w_v: weights(&[d, d])?,
                ffn_w1: weights(&[d, d])?,
                ffn_b1: Tensor::zeros(&[d])?,
                ffn_w2: weights(&[d, d])?,
                ffn_b2: Tensor::zeros(&[d])?,
                attn_norm_gain: Tensor::filled(&[d], 1.0)?,
                attn_norm_bias: Tensor::zeros(&[d])?,
                ffn_norm_gain: Tensor::filled(&[d], 1.0)?,
                ffn_norm_bias: Tensor::zeros(&[d])?,
            });
        }
        Ok(ModelParams {
            user,
            item,
            pos,
            blocks,
            final_norm_gain: Tensor::filled(&[d], 1.0)?,
            final_norm_bias: Tensor::zeros(&[d])?,
        })
    }

    /// Every tensor in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.user.iter().collect();
        v.push(&self.item);
        v.push(&self.pos);
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.final_norm_gain);
        v.push(&self.final_norm_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.user.iter_mut().collect();
        v.push(&mut self.item);
        v.push(&mut self.pos);
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.final_norm_gain);
        v.push(&mut self.final_norm_bias);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.user.iter().map(|_| "user_table".to_string()).collect();
        v.push("item_table".into());
        v.push("position_table".into());
        for (i, _) in self.blocks.iter().enumerate() {
            v.extend(BlockParams::NAMES.iter().map(|n| format!("block{i}.{n}")));
        }
        v.push("final_norm_gain".into());
        v.push("final_norm_bias".into());
        v
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        let mut v: Vec<ParamKind> = self.user.iter().map(|_| ParamKind::UserTable).collect();
        v.push(ParamKind::ItemTable);
        v.push(ParamKind::PositionTable);
        v.extend(std::iter::repeat(ParamKind::Dense).take(self.blocks.len() * 11 + 2));
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Output embedding `[v_item; u_user]`.
    pub fn output_embedding(&self, item: usize, user: usize) -> Vec<f64> {
        let mut e = self.item.row(item).to_vec();
        if let Some(u) = &self.user {
            e.extend_from_slice(u.row(user));
        }
        e
    }
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub attn_norm_gain: NodeId,
    pub attn_norm_bias: NodeId,
    pub ffn_norm_gain: NodeId,
    pub ffn_norm_bias: NodeId,
}

/// Graph leaves for one parameter set, in canonical order in `all`.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub user: Option<NodeId>,
    pub item: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<BoundBlock>,
    pub final_norm_gain: NodeId,
    pub final_norm_bias: NodeId,
    pub all: Vec<NodeId>,
}

pub fn bind<'a>(g: &mut Graph<'a>, params: &'a ModelParams, trainable: bool) -> BoundParams {
    let all: Vec<NodeId> = params
        .tensors()
        .into_iter()
        .map(|t| if trainable { g.param(t) } else { g.input(t) })
        .collect();
    let mut it = all.iter().copied();
    let mut next = || it.next().expect("parameter count matches layout");
    let user = params.user.as_ref().map(|_| next());
    let item = next();
    let pos = next();
    let blocks = params
        .blocks
        .iter()
        .map(|_| BoundBlock {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            ffn_w1: next(),
            ffn_b1: next(),
            ffn_w2: next(),
            ffn_b2: next(),
            attn_norm_gain: next(),
            attn_norm_bias: next(),
            ffn_norm_gain: next(),
            ffn_norm_bias: next(),
        })
        .collect();
    let final_norm_gain = next();
    let final_norm_bias = next();
    BoundParams {
        user,
        item,
        pos,
        blocks,
        final_norm_gain,
        final_norm_bias,
        all,
    }
}

/// Source of dropout masks; `None` means inference mode.
pub struct Dropout<'r, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'r mut R,
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    /// Inverted-dropout mask: kept units are scaled by `1/(1−rate)`.
    pub fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect()
    }
}

fn maybe_dropout<R: Rng + ?Sized>(g: &mut Graph<'_>, x: NodeId, dropout: &mut Option<Dropout<'_, R>>) -> Result<NodeId> {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let mask = d.mask(g.value(x).numel());
            g.dropout_apply(x, mask)
        }
        _ => Ok(x),
    }
}

fn check_index(what: &str, idx: usize, table_rows: usize) -> Result<()> {
    if idx >= table_rows {
        return Err(Error::Contract(format!(
            "{what} index {idx} out of range (table has {table_rows} rows)"
        )));
    }
    Ok(())
}

/// `E` with row `t = [v_{item_t}; u_user] + p_t`, dropout applied in training.
pub fn embed_sequence<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    bound: &BoundParams,
    user: usize,
    items: &[usize],
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<NodeId> {
    let t = g.value(bound.pos).rows();
    if items.len() != t {
        return Err(Error::Contract(format!(
            "sequence length {} does not match max_len {t}",
            items.len()
        )));
    }
    let item_rows = g.value(bound.item).rows();
    for &i in items {
        check_index("item", i, item_rows)?;
    }
    let mut e = g.gather(bound.item, items.to_vec())?;
    if let Some(u) = bound.user {
        check_index("user", user, g.value(u).rows())?;
        let ue = g.gather(u, vec![user; t])?;
        e = g.concat_cols(e, ue)?;
    }
    let e = g.add(e, bound.pos)?;
    maybe_dropout(g, e, dropout)
}

/// One pre-norm attention block; returns the block output and the attention
/// weight node.
pub fn attention_block<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    block: &BoundBlock,
    x: NodeId,
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<(NodeId, NodeId)> {
    let d = g.value(x).cols();
    let h = g.layer_norm(x, block.attn_norm_gain, block.attn_norm_bias)?;
    let q = g.matmul(h, block.w_q)?;
    let k = g.matmul(h, block.w_k)?;
    let v = g.matmul(h, block.w_v)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.masked_softmax(scores)?;
    let attended = g.matmul(weights, v)?;
    let attended = maybe_dropout(g, attended, dropout)?;
    let x1 = g.add(x, attended)?;

    let h = g.layer_norm(x1, block.ffn_norm_gain, block.ffn_norm_bias)?;
    let f = g.matmul(h, block.ffn_w1)?;
    let f = g.add_row(f, block.ffn_b1)?;
    let f = g.relu(f);
    let f = g.matmul(f, block.ffn_w2)?;
    let f = g.add_row(f, block.ffn_b2)?;
    let f = maybe_dropout(g, f, dropout)?;
    let x2 = g.add(x1, f)?;
    Ok((x2, weights))
}

/// Full stack: embedding, every block, final layer norm. Returns the `T×d`
/// hidden states and one attention-weight node per block.
pub fn forward<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    bound: &BoundParams,
    user: usize,
    items: &[usize],
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let mut x = embed_sequence(g, bound, user, items, dropout)?;
    let mut maps = Vec::with_capacity(bound.blocks.len());
    for block in &bound.blocks {
        let (next, w) = attention_block(g, block, x, dropout)?;
        maps.push(w);
        x = next;
    }
    let out = g.layer_norm(x, bound.final_norm_gain, bound.final_norm_bias)?;
    Ok((out, maps))
}

/// Output embeddings `[v_item; u_user]` for several items, one row each.
pub fn output_embeddings(g: &mut Graph<'_>, bound: &BoundParams, items: Vec<usize>, users: Vec<usize>) -> Result<NodeId> {
    let item_rows = g.value(bound.item).rows();
    for &i in &items {
        check_index("item", i, item_rows)?;
    }
    let v = g.gather(bound.item, items)?;
    match bound.user {
        Some(u) => {
            let ue = g.gather(u, users)?;
            g.concat_cols(v, ue)
        }
        None => Ok(v),
    }
}

/// Per-block `T×T` causal attention weights for one input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub hidden: Tensor,
    pub maps: Vec<AttentionMap>,
}

impl Inference {
    /// Hidden state after consuming the whole input window.
    pub fn last_hidden(&self) -> &[f64] {
        self.hidden.row(self.hidden.rows() - 1)
    }
}

/// Inference-mode forward pass (no dropout, no gradients).
pub fn infer(params: &ModelParams, user: usize, items: &[usize]) -> Result<Inference> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let mut none: Option<Dropout<'_, rand::rngs::mock::StepRng>> = None;
    let (h, maps) = forward(&mut g, &bound, user, items, &mut none)?;
    Ok(Inference {
        hidden: g.value(h).clone(),
        maps: maps
            .into_iter()
            .enumerate()
            .map(|(block, id)| AttentionMap {
                block,
                weights: g.value(id).clone(),
            })
            .collect(),
    })
}

pub fn extract_attention_maps(params: &ModelParams, user: usize, items: &[usize]) -> Result<Vec<AttentionMap>> {
    Ok(infer(params, user, items)?.maps)
}

/// `r = h_step · [v_item; u_user]`.
pub fn score(hidden: &Tensor, step: usize, item: usize, user: usize, params: &ModelParams) -> f64 {
    score_row(hidden.row(step), item, user, params)
}

pub fn score_row(h: &[f64], item: usize, user: usize, params: &ModelParams) -> f64 {
    let di = params.item.cols();
    let mut s = tensor::dot(&h[..di], params.item.row(item));
    if let Some(u) = &params.user {
        s += tensor::dot(&h[di..], u.row(user));
    }
    s
}

pub fn score_items(h: &[f64], items: &[usize], user: usize, params: &ModelParams) -> Vec<f64> {
    items.iter().map(|&i| score_row(h, i, user, params)).collect()
}
