//! Losses, negative sampling, Adam, and the epoch loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::dataio::{pad_and_window, training_pairs, DatasetSplit, WindowConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalSplit, ModelScorer};
use crate::model::{self, bind, BoundParams, Dropout, ModelConfig, ModelParams};
use crate::regularization::{sse_apply_batch, weight_decay_grads, DecayConfig, SseConfig, SseExample, TouchedRows};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Bpr,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "bpr" => Ok(LossKind::Bpr),
            _ => Err(Error::Contract(format!("unknown loss `{s}` (expected bce or bpr)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Bpr => "bpr",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub negatives_per_positive: usize,
    /// `None` disables the SSE-SE regularizer entirely.
    pub sse: Option<SseConfig>,
    pub decay: DecayConfig,
    pub sampling_prob: f64,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.98,
            adam_epsilon: 1e-8,
            batch_size: 128,
            epochs: 200,
            seed: 0,
            loss: LossKind::Bce,
            negatives_per_positive: 1,
            sse: Some(SseConfig::default()),
            decay: DecayConfig::default(),
            sampling_prob: 0.0,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return fail(format!("adam_epsilon must be > 0, got {}", self.adam_epsilon));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if self.negatives_per_positive == 0 {
            return fail("negatives_per_positive must be ≥ 1".into());
        }
        if !(self.decay.lambda >= 0.0) {
            return fail(format!("weight decay must be ≥ 0, got {}", self.decay.lambda));
        }
        if let Some(sse) = &self.sse {
            sse.validate()?;
        }
        self.eval.validate()?;
        WindowConfig {
            max_len: 2,
            sampling_prob: self.sampling_prob,
        }
        .validate()
    }
}

/// Scalar loss node and the number of steps that contributed to it.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub node: NodeId,
    pub valid_steps: usize,
}

fn select_valid(g: &mut Graph<'_>, pos: NodeId, neg: NodeId, mask: &[bool]) -> Result<Option<(NodeId, NodeId, usize)>> {
    let n = g.value(pos).rows();
    if mask.len() != n || g.value(neg).rows() != n || g.value(pos).cols() != 1 {
        return Err(Error::dim(
            "loss",
            format!(
                "positives {:?}, negatives {:?}, mask of {}",
                g.value(pos).shape(),
                g.value(neg).shape(),
                mask.len()
            ),
        ));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let k = rows.len();
    if k == 0 {
        return Ok(None);
    }
    if k == n {
        return Ok(Some((pos, neg, k)));
    }
    let p = g.gather(pos, rows.clone())?;
    let q = g.gather(neg, rows)?;
    Ok(Some((p, q, k)))
}

/// Mean over unmasked steps of `−[ln σ(r⁺) + Σ_k ln(1 − σ(r⁻_k))]`.
/// `pos` is `N×1`, `neg` is `N×C`. An all-masked input yields a constant 0.
pub fn bce_loss(g: &mut Graph<'_>, pos: NodeId, neg: NodeId, mask: &[bool]) -> Result<LossValue> {
    let Some((p, q, k)) = select_valid(g, pos, neg, mask)? else {
        return Ok(LossValue {
            node: g.constant(Tensor::scalar(0.0)),
            valid_steps: 0,
        });
    };
    let lp = g.log_sigmoid(p);
    let sp = g.sum(lp);
    let nq = g.scale(q, -1.0);
    let lq = g.log_sigmoid(nq);
    let sq = g.sum(lq);
    let total = g.add(sp, sq)?;
    Ok(LossValue {
        node: g.scale(total, -1.0 / k as f64),
        valid_steps: k,
    })
}

/// Mean over unmasked steps of `−Σ_k ln σ(r⁺ − r⁻_k)`.
pub fn bpr_loss(g: &mut Graph<'_>, pos: NodeId, neg: NodeId, mask: &[bool]) -> Result<LossValue> {
    let Some((p, q, k)) = select_valid(g, pos, neg, mask)? else {
        return Ok(LossValue {
            node: g.constant(Tensor::scalar(0.0)),
            valid_steps: 0,
        });
    };
    let c = g.value(q).cols();
    let flat = g.reshape(q, vec![k * c, 1])?;
    let repeated = g.gather(p, (0..k).flat_map(|i| std::iter::repeat(i).take(c)).collect())?;
    let neg_flat = g.scale(flat, -1.0);
    let diff = g.add(repeated, neg_flat)?;
    let l = g.log_sigmoid(diff);
    let s = g.sum(l);
    Ok(LossValue {
        node: g.scale(s, -1.0 / k as f64),
        valid_steps: k,
    })
}

/// Uniform rejection sampler over the items a user never interacted with.
pub struct NegativeSampler<'d> {
    histories: &'d [Vec<usize>],
    n_items: usize,
}

impl<'d> NegativeSampler<'d> {
    pub fn new(histories: &'d [Vec<usize>], n_items: usize) -> Self {
        NegativeSampler { histories, n_items }
    }

    pub fn sample<R: Rng + ?Sized>(&self, user: usize, rng: &mut R) -> Result<usize> {
        let history = &self.histories[user];
        if history.len() >= self.n_items {
            return Err(Error::Sampling { user });
        }
        loop {
            let i = rng.gen_range(1..=self.n_items);
            if history.binary_search(&i).is_err() {
                return Ok(i);
            }
        }
    }
}

/// Bias-corrected Adam moments, one buffer pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update. `grads` is aligned with [`ModelParams::tensors`]. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        let names = params.names();
        let mut tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::dim(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), tensors.len()),
            ));
        }
        for ((g, t), name) in grads.iter().zip(&tensors).zip(&names) {
            if g.shape() != t.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("gradient {:?} for `{name}` of shape {:?}", g.shape(), t.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { param: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, (param, grad)) in tensors.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
            }
        }
        Ok(())
    }
}

/// One user's training view: model inputs, the positions that carry a loss
/// term, and their targets and negatives (`negatives_per_positive` per step).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub steps: Vec<usize>,
    pub indices: SseExample,
}

impl Example {
    pub fn padding(max_len: usize) -> Self {
        Example {
            steps: Vec::new(),
            indices: SseExample {
                user: 0,
                inputs: vec![0; max_len],
                targets: Vec::new(),
                negatives: Vec::new(),
            },
        }
    }
}

/// Builds the batch loss on `g`. Examples without loss-carrying steps are
/// skipped entirely.
pub fn batch_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    bound: &BoundParams,
    batch: &[Example],
    kind: LossKind,
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<LossValue> {
    let mut pos_parts = Vec::new();
    let mut neg_parts = Vec::new();
    let mut c = 0;
    for ex in batch.iter().filter(|e| !e.steps.is_empty()) {
        let k = ex.steps.len();
        let idx = &ex.indices;
        if idx.targets.len() != k || idx.negatives.is_empty() || idx.negatives.len() % k != 0 {
            return Err(Error::Contract(format!(
                "example has {k} steps, {} targets, {} negatives",
                idx.targets.len(),
                idx.negatives.len()
            )));
        }
        let per = idx.negatives.len() / k;
        if c != 0 && per != c {
            return Err(Error::Contract("negatives per step differ within a batch".into()));
        }
        c = per;

        let (hidden, _) = model::forward(g, bound, idx.user, &idx.inputs, dropout)?;
        let h = g.gather(hidden, ex.steps.clone())?;
        let out = model::output_embeddings(g, bound, idx.targets.clone(), vec![idx.user; k])?;
        pos_parts.push(g.row_dot(h, out)?);

        let h_rep = g.gather(hidden, ex.steps.iter().flat_map(|&s| std::iter::repeat(s).take(c)).collect())?;
        let out = model::output_embeddings(g, bound, idx.negatives.clone(), vec![idx.user; k * c])?;
        let neg = g.row_dot(h_rep, out)?;
        neg_parts.push(g.reshape(neg, vec![k, c])?);
    }
    if pos_parts.is_empty() {
        return Ok(LossValue {
            node: g.constant(Tensor::scalar(0.0)),
            valid_steps: 0,
        });
    }
    let pos = g.concat_rows(pos_parts)?;
    let neg = g.concat_rows(neg_parts)?;
    let mask = vec![true; g.value(pos).rows()];
    match kind {
        LossKind::Bce => bce_loss(g, pos, neg, &mask),
        LossKind::Bpr => bpr_loss(g, pos, neg, &mask),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub k: usize,
    pub valid_ndcg: f64,
    pub valid_recall: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// `epoch=… train_loss=… valid_ndcg10=… valid_recall10=… wall_seconds=…`
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={} valid_ndcg{k}={} valid_recall{k}={} wall_seconds={:.3}",
            self.epoch,
            self.train_loss,
            self.valid_ndcg,
            self.valid_recall,
            self.wall_seconds,
            k = self.k
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation NDCG (the initial ones if no epoch ran).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
    pub last: ModelParams,
    pub log: Vec<EpochLog>,
    /// Batches in which every step was masked.
    pub empty_batches: usize,
}

struct Streams {
    order: ChaCha8Rng,
    window: ChaCha8Rng,
    negatives: ChaCha8Rng,
    sse: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

struct Clock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Clock {
    fn start() -> Self {
        Clock(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// Incremental trainer: owns the parameters, optimizer state and RNG streams.
pub struct Trainer {
    split: DatasetSplit,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    params: ModelParams,
    adam: AdamState,
    streams: Streams,
    epoch: usize,
    best: ModelParams,
    best_epoch: usize,
    best_valid_ndcg: f64,
    log: Vec<EpochLog>,
    empty_batches: usize,
}

impl Trainer {
    pub fn new(split: DatasetSplit, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        if model_cfg.n_users != split.n_users || model_cfg.n_items != split.n_items {
            return Err(Error::dim(
                "train",
                format!(
                    "model sized for {}×{} users×items, data has {}×{}",
                    model_cfg.n_users, model_cfg.n_items, split.n_users, split.n_items
                ),
            ));
        }
        let params = ModelParams::init(&model_cfg, &mut stream(cfg.seed, 0))?;
        let streams = Streams {
            order: stream(cfg.seed, 1),
            window: stream(cfg.seed, 2),
            negatives: stream(cfg.seed, 3),
            sse: stream(cfg.seed, 4),
            dropout: stream(cfg.seed, 5),
        };
        Ok(Trainer {
            adam: AdamState::new(&params),
            best: params.clone(),
            params,
            split,
            model_cfg,
            cfg,
            streams,
            epoch: 0,
            best_epoch: 0,
            best_valid_ndcg: f64::NEG_INFINITY,
            log: Vec::new(),
            empty_batches: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn best_params(&self) -> &ModelParams {
        &self.best
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    fn prepare(&mut self, user: usize) -> Result<Example> {
        let wcfg = WindowConfig {
            max_len: self.model_cfg.max_len,
            sampling_prob: self.cfg.sampling_prob,
        };
        let window = pad_and_window(&self.split.users[user].train, &wcfg, &mut self.streams.window)?;
        let pairs = training_pairs(&window);
        let sampler = NegativeSampler::new(&self.split.histories, self.split.n_items);
        let mut steps = Vec::new();
        let mut targets = Vec::new();
        let mut negatives = Vec::new();
        for (p, _, target) in pairs.steps() {
            steps.push(p);
            targets.push(target);
            for _ in 0..self.cfg.negatives_per_positive {
                negatives.push(sampler.sample(user, &mut self.streams.negatives)?);
            }
        }
        Ok(Example {
            steps,
            indices: SseExample {
                user,
                inputs: pairs.inputs,
                targets,
                negatives,
            },
        })
    }

    /// Forward, backward, decay and Adam on one batch of examples; returns the
    /// batch loss and its step count.
    pub fn train_batch(&mut self, batch: &mut [Example]) -> Result<(f64, usize)> {
        if let Some(sse) = &self.cfg.sse {
            let mut idx: Vec<SseExample> = batch.iter().map(|e| e.indices.clone()).collect();
            sse_apply_batch(&mut idx, sse, self.split.n_users, self.split.n_items, &mut self.streams.sse)?;
            for (e, i) in batch.iter_mut().zip(idx) {
                e.indices = i;
            }
        }
        let touched = TouchedRows::from_examples(&batch.iter().map(|e| e.indices.clone()).collect::<Vec<_>>());

        let (loss_value, steps, mut grads) = {
            let mut g = Graph::new();
            let bound = bind(&mut g, &self.params, true);
            let mut dropout = Some(Dropout {
                rate: self.model_cfg.dropout,
                rng: &mut self.streams.dropout,
            });
            let loss = batch_loss(&mut g, &bound, batch, self.cfg.loss, &mut dropout)?;
            let value = g.value(loss.node).data()[0];
            let mut gr = g.backward(loss.node)?;
            let grads: Vec<Tensor> = bound
                .all
                .iter()
                .zip(self.params.tensors())
                .map(|(&id, t)| gr.take(id).unwrap_or_else(|| Tensor::zeros(t.shape()).expect("valid shape")))
                .collect();
            (value, loss.valid_steps, grads)
        };
        if steps == 0 {
            self.empty_batches += 1;
        }
        weight_decay_grads(&self.params, &mut grads, &touched, &self.cfg.decay);
        self.adam.step(&mut self.params, &grads, &self.cfg)?;
        Ok((loss_value, steps))
    }

    /// One pass over all users with training data, then validation.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let clock = Clock::start();
        let mut users: Vec<usize> = (1..=self.split.n_users)
            .filter(|&u| !self.split.users[u].train.is_empty())
            .collect();
        users.shuffle(&mut self.streams.order);

        let mut loss_sum = 0.0;
        let mut step_sum = 0;
        for chunk in users.chunks(self.cfg.batch_size) {
            let mut batch = chunk.iter().map(|&u| self.prepare(u)).collect::<Result<Vec<_>>>()?;
            let (loss, steps) = self.train_batch(&mut batch)?;
            loss_sum += loss * steps as f64;
            step_sum += steps;
        }
        let train_wall = clock.seconds();
        self.epoch += 1;

        let report = evaluate(
            &ModelScorer { params: &self.params },
            &self.split,
            EvalSplit::Valid,
            &self.cfg.eval,
        )?;
        if report.ndcg_at_k > self.best_valid_ndcg {
            self.best_valid_ndcg = report.ndcg_at_k;
            self.best_epoch = self.epoch;
            self.best = self.params.clone();
        }
        let entry = EpochLog {
            epoch: self.epoch,
            train_loss: if step_sum == 0 { 0.0 } else { loss_sum / step_sum as f64 },
            k: self.cfg.eval.k,
            valid_ndcg: report.ndcg_at_k,
            valid_recall: report.recall_at_k,
            wall_seconds: train_wall,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            best: self.best,
            best_epoch: self.best_epoch,
            best_valid_ndcg: self.best_valid_ndcg,
            last: self.params,
            log: self.log,
            empty_batches: self.empty_batches,
        }
    }
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each one.
pub fn train(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(split.clone(), model_cfg.clone(), cfg.clone())?;
    for _ in 0..cfg.epochs {
        let entry = trainer.run_epoch()?;
        on_epoch(&entry);
    }
    Ok(trainer.finish())
}
