//! Browser demo: a personalized model and an un-personalized one train side by
//! side on two user populations that share items but follow different
//! transition rules. The page plots both validation curves, draws attention
//! maps and lists recommendations with how many follow the user's own rule.

use ssept::dataio::{inference_window, split_leave_last_two};
use ssept::evaluation::EvalConfig;
use ssept::model::{extract_attention_maps, infer, score_items, ModelConfig, ModelParams};
use ssept::synthetic::{successors, two_population, Populations, TwoPopulation};
use ssept::training::{EpochLog, TrainConfig, Trainer};
use wasm_bindgen::prelude::*;

const MAX_LEN: usize = 20;

/// One epoch of both models.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPair {
    pub epoch: usize,
    pub personalized: EpochLog,
    pub plain: EpochLog,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recommendation {
    pub item: usize,
    pub score: f64,
    /// The item is a successor of the user's last item under their group's rule.
    pub follows_rule: bool,
}

pub struct Demo {
    data: TwoPopulation,
    populations: Populations,
    rules: [Vec<Vec<usize>>; 2],
    personalized: Trainer,
    plain: Trainer,
}

fn model(data: &TwoPopulation, d_user: usize, d_item: usize) -> ModelConfig {
    ModelConfig {
        n_users: data.users,
        n_items: data.items,
        d_user,
        d_item,
        max_len: MAX_LEN,
        blocks: 1,
        dropout: 0.1,
    }
}

impl Demo {
    pub fn new(seed: u64) -> ssept::Result<Self> {
        let data = TwoPopulation {
            seed,
            ..TwoPopulation::default()
        };
        let populations = two_population(&data);
        let split = split_leave_last_two(&populations.sequences, data.users, data.items);
        let cfg = TrainConfig {
            epochs: 0,
            learning_rate: 0.02,
            batch_size: 32,
            seed,
            sse: None,
            eval: EvalConfig {
                k: 10,
                negatives: 15,
                seed,
            },
            ..TrainConfig::default()
        };
        // equal total width: 8 + 16 against 24
        let personalized = Trainer::new(split.clone(), model(&data, 8, 16), cfg.clone())?;
        let plain = Trainer::new(split, model(&data, 0, 24), cfg)?;
        Ok(Demo {
            rules: [successors(&data, 0), successors(&data, 1)],
            data,
            populations,
            personalized,
            plain,
        })
    }

    pub fn users(&self) -> usize {
        self.data.users
    }

    pub fn max_len(&self) -> usize {
        MAX_LEN
    }

    pub fn group(&self, user: usize) -> u8 {
        self.populations.groups[user - 1]
    }

    pub fn step(&mut self) -> ssept::Result<EpochPair> {
        let personalized = self.personalized.run_epoch()?;
        let plain = self.plain.run_epoch()?;
        Ok(EpochPair {
            epoch: personalized.epoch,
            personalized,
            plain,
        })
    }

    fn params(&self, personalized: bool) -> &ModelParams {
        if personalized {
            self.personalized.params()
        } else {
            self.plain.params()
        }
    }

    fn check_user(&self, user: usize) -> ssept::Result<()> {
        if user == 0 || user > self.data.users {
            return Err(ssept::Error::Contract(format!("user must lie in 1..={}", self.data.users)));
        }
        Ok(())
    }

    /// The model input for `user`: training items plus the validation item,
    /// in the inference layout (leading padding).
    pub fn window(&self, user: usize) -> ssept::Result<Vec<usize>> {
        self.check_user(user)?;
        let s = &self.personalized.split().users[user];
        let mut items = s.train.clone();
        items.extend(s.valid);
        Ok(inference_window(&items, MAX_LEN))
    }

    /// Row-major `T×T` attention weights of the first block.
    pub fn attention(&self, user: usize, personalized: bool) -> ssept::Result<Vec<f64>> {
        let window = self.window(user)?;
        let maps = extract_attention_maps(self.params(personalized), user, &window)?;
        Ok(maps[0].weights.data().to_vec())
    }

    /// Top `k` unseen items after the user's window.
    pub fn recommend(&self, user: usize, k: usize, personalized: bool) -> ssept::Result<Vec<Recommendation>> {
        let window = self.window(user)?;
        let params = self.params(personalized);
        let inf = infer(params, user, &window)?;
        let seen = &window[..];
        let items: Vec<usize> = (1..=self.data.items).filter(|i| !seen.contains(i)).collect();
        let scores = score_items(inf.last_hidden(), &items, user, params);
        let mut ranked: Vec<(usize, f64)> = items.into_iter().zip(scores).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let last = *window.last().expect("window is never empty");
        let rule = &self.rules[self.group(user) as usize][last - 1];
        Ok(ranked
            .into_iter()
            .take(k)
            .map(|(item, score)| Recommendation {
                item,
                score,
                follows_rule: rule.contains(&item),
            })
            .collect())
    }
}

fn js(e: ssept::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// JavaScript handle around [`Demo`].
#[wasm_bindgen]
pub struct Session {
    inner: Demo,
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Session, JsError> {
        Ok(Session {
            inner: Demo::new(seed as u64).map_err(js)?,
        })
    }

    pub fn users(&self) -> usize {
        self.inner.users()
    }

    #[wasm_bindgen(js_name = maxLen)]
    pub fn max_len(&self) -> usize {
        self.inner.max_len()
    }

    pub fn group(&self, user: usize) -> u8 {
        self.inner.group(user)
    }

    /// Runs one epoch of both models: `[epoch, loss, ndcg, loss, ndcg]`,
    /// personalized first.
    pub fn step(&mut self) -> Result<Vec<f64>, JsError> {
        let p = self.inner.step().map_err(js)?;
        Ok(vec![
            p.epoch as f64,
            p.personalized.train_loss,
            p.personalized.valid_ndcg,
            p.plain.train_loss,
            p.plain.valid_ndcg,
        ])
    }

    pub fn window(&self, user: usize) -> Result<Vec<u32>, JsError> {
        Ok(self.inner.window(user).map_err(js)?.into_iter().map(|i| i as u32).collect())
    }

    pub fn attention(&self, user: usize, personalized: bool) -> Result<Vec<f64>, JsError> {
        self.inner.attention(user, personalized).map_err(js)
    }

    /// Flattened `[item, score, follows_rule]` triples.
    pub fn recommend(&self, user: usize, k: usize, personalized: bool) -> Result<Vec<f64>, JsError> {
        Ok(self
            .inner
            .recommend(user, k, personalized)
            .map_err(js)?
            .into_iter()
            .flat_map(|r| [r.item as f64, r.score, f64::from(u8::from(r.follows_rule))])
            .collect())
    }
}
