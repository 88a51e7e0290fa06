//! Value-based agent on the normalized encoder: replay, target network,
//! epsilon-greedy exploration and random-shift augmentation.

mod augment;
mod optim;
mod qnet;
mod replay;

pub use augment::{random_shift, shift_with_offset};
pub use optim::{Adam, AdamConfig};
pub use qnet::{argmax, soft_update, QCache, QNet};
pub use replay::{ReplayBuffer, Transition};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Grads};
use crate::error::{Error, Result};
use crate::numcore::{checkpoint, grad_check_piecewise, huber, GradCheckReport, Prng, Real, Tensor};
use crate::pixelworld::{Action, Observation, FRAME_LEN, STACK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: usize,
    pub tau: f64,
    pub update_every: usize,
    pub shift_pad: usize,
    pub buffer_capacity: usize,
    /// Environment steps of uniform-random play before the first update.
    pub learning_starts: usize,
    pub adam: AdamConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-3,
            batch: 128,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_decay_steps: 20_000,
            tau: 0.01,
            update_every: 2,
            shift_pad: 4,
            buffer_capacity: 50_000,
            learning_starts: 1_000,
            adam: AdamConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("lr must be positive and tau within [0, 1]"));
        }
        if self.batch == 0 || self.update_every == 0 {
            return Err(Error::config("batch and update_every must be positive"));
        }
        if encoder.k_active > 0 && self.batch < 2 {
            return Err(Error::config("CrossNorm needs a batch of at least 2"));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(Error::config("exploration rates must lie in [0, 1]"));
        }
        if self.buffer_capacity < self.batch {
            return Err(Error::config("replay capacity is smaller than the batch"));
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over `eps_decay_steps`.
    pub fn epsilon(&self, step: usize) -> f64 {
        if self.eps_decay_steps == 0 || step >= self.eps_decay_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.eps_decay_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Stack observations into `[N, 9, 48, 48]` with values in `[0, 1]`.
pub fn obs_batch<'a>(obs: impl ExactSizeIterator<Item = &'a Observation>) -> Tensor<f32> {
    let n = obs.len();
    let per = STACK * FRAME_LEN;
    let mut data = vec![0.0f32; n * per];
    for (o, chunk) in obs.zip(data.chunks_mut(per)) {
        o.write_into(chunk, 0.0);
    }
    Tensor::from_vec(&[n, 3 * STACK, crate::pixelworld::FRAME_SIDE, crate::pixelworld::FRAME_SIDE], data)
        .expect("sized above")
}

/// Greedy actions for a batch, lowest index on ties.
pub fn greedy_actions<T: Real>(qnet: &QNet<T>, obs: &Tensor<T>) -> Result<Vec<Action>> {
    let q = qnet.q_values(obs)?;
    q.data()
        .chunks(Action::COUNT)
        .map(|row| Action::from_index(argmax(row)))
        .collect()
}

/// Epsilon-greedy action; the network is consulted only on the greedy branch.
pub fn act<T: Real>(obs: &Tensor<T>, qnet: &QNet<T>, epsilon: f64, rng: &mut Prng) -> Result<Action> {
    if rng.uniform() < epsilon {
        return Action::from_index(rng.below(Action::COUNT as u64) as usize);
    }
    Ok(greedy_actions(qnet, obs)?[0])
}

/// Already-augmented batch.
#[derive(Clone, Debug)]
pub struct TdBatch<T> {
    pub obs: Tensor<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<T>,
    pub next_obs: Tensor<T>,
    pub terminal: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TdOutcome<T> {
    pub loss: T,
    pub grads: Grads<T>,
    pub cache: QCache<T>,
    huber_branches: u64,
}

impl<T: Real> TdOutcome<T> {
    /// Signature of the active linear pieces (ReLU bits and Huber branches).
    pub fn signature(&self) -> u64 {
        self.cache.activation_signature() ^ self.huber_branches.rotate_left(17)
    }
}

/// Bootstrap targets `r + gamma * (1 - terminal) * max_a Q_target(s', a)`,
/// target network in eval mode.
pub fn td_targets<T: Real>(target: &QNet<T>, batch: &TdBatch<T>, gamma: f64) -> Result<Vec<T>> {
    let q_next = target.q_values(&batch.next_obs)?;
    let gamma = T::from_f64(gamma);
    Ok(q_next
        .data()
        .chunks(Action::COUNT)
        .zip(&batch.rewards)
        .zip(&batch.terminal)
        .map(|((row, &r), &term)| {
            if term {
                r
            } else {
                r + gamma * row[argmax(row)]
            }
        })
        .collect())
}

/// Mean Huber TD loss and its exact gradient with respect to the online network.
pub fn td_loss<T: Real>(
    online: &QNet<T>,
    batch: &TdBatch<T>,
    targets: &[T],
    rng: &mut Prng,
) -> Result<TdOutcome<T>> {
    let n = batch.actions.len();
    if n < 2 || targets.len() != n || batch.rewards.len() != n || batch.terminal.len() != n {
        return Err(Error::config(format!("TD batch needs at least 2 consistent entries, got {n}")));
    }
    let (q, cache) = online.forward_train(&batch.obs, rng)?;
    let inv_n = T::ONE / T::from_usize(n);
    let mut loss = T::ZERO;
    let mut upstream = Tensor::zeros(q.shape());
    let mut branches = 0u64;
    for (i, (&a, &y)) in batch.actions.iter().zip(targets).enumerate() {
        let d = q.data()[i * Action::COUNT + a] - y;
        let (l, dl) = huber(d);
        loss += l * inv_n;
        upstream.data_mut()[i * Action::COUNT + a] = dl * inv_n;
        branches = branches.wrapping_mul(3).wrapping_add(if d.abs() <= T::ONE { 0 } else if d > T::ZERO { 1 } else { 2 });
    }
    if !loss.is_finite() {
        return Err(Error::numeric(format!("TD loss is not finite ({})", loss.to_f64())));
    }
    let grads = online.backward(&cache, &upstream)?;
    for (g, (name, _)) in grads.iter().zip(online.param_tensors()) {
        g.check_finite(&format!("gradient of {name}"))?;
    }
    Ok(TdOutcome {
        loss,
        grads,
        cache,
        huber_branches: branches,
    })
}

/// Online/target pair with optimizer state and replay.
#[derive(Clone, Debug)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub online: QNet<f32>,
    pub target: QNet<f32>,
    pub adam: Adam<f32>,
    pub replay: ReplayBuffer,
    pub updates: u64,
    replay_rng: Prng,
    shift_rng: Prng,
    norm_rng: Prng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_q: f64,
}

impl Agent {
    pub fn new(cfg: AgentConfig, encoder: &EncoderConfig, rng: &Prng) -> Result<Agent> {
        encoder.validate()?;
        cfg.validate(encoder)?;
        if let Some(w) = encoder.stability_warning(cfg.batch) {
            log::warn!("{w}");
        }
        let online = QNet::<f32>::new(encoder, &mut rng.split_named("init"))?;
        let target = online.clone();
        let adam = Adam::new(online.param_tensors().into_iter().map(|(_, t)| t), cfg.adam);
        Ok(Agent {
            replay: ReplayBuffer::new(cfg.buffer_capacity)?,
            online,
            target,
            adam,
            updates: 0,
            replay_rng: rng.split_named("replay"),
            shift_rng: rng.split_named("shift"),
            norm_rng: rng.split_named("crossnorm"),
            cfg,
        })
    }

    /// Replace the replay, shift and CrossNorm sampling streams.
    pub fn reseed(&mut self, rng: &Prng) {
        self.replay_rng = rng.split_named("replay");
        self.shift_rng = rng.split_named("shift");
        self.norm_rng = rng.split_named("crossnorm");
    }

    /// Save both networks and the optimizer moments. The replay buffer is not saved.
    pub fn save_checkpoint(&self, dir: &Path, mut meta: serde_json::Value) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (prefix, net) in [("online", &self.online), ("target", &self.target)] {
            tensors.extend(net.state_tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            tensors.push((format!("adam.m.{i}"), m));
            tensors.push((format!("adam.v.{i}"), v));
        }
        if let Some(obj) = meta.as_object_mut() {
            obj.insert("updates".into(), self.updates.into());
            obj.insert("adam_t".into(), self.adam.t.into());
        }
        checkpoint::save(dir, &tensors, meta)?;
        Ok(())
    }

    /// Restore networks and optimizer state; returns the checkpoint metadata.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<serde_json::Value> {
        let (manifest, tensors) = checkpoint::load::<f32>(dir)?;
        let take = |prefix: &str| -> Vec<Tensor<f32>> {
            tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, t)| t.clone())
                .collect()
        };
        self.online.load_state(take("online."))?;
        self.target.load_state(take("target."))?;
        let (m, v) = (take("adam.m."), take("adam.v."));
        if m.len() != self.adam.m.len() || v.len() != self.adam.v.len() {
            return Err(Error::Schema("checkpoint optimizer state does not match the network".into()));
        }
        self.adam.m = m;
        self.adam.v = v;
        let meta = manifest.meta;
        self.adam.t = meta["adam_t"].as_u64().unwrap_or(0);
        self.updates = meta["updates"].as_u64().unwrap_or(0);
        Ok(meta)
    }

    pub fn ready(&self, env_steps: usize) -> bool {
        env_steps >= self.cfg.learning_starts && self.replay.len() >= self.cfg.batch
    }

    /// Sample, augment, take one Adam step and soft-update the target.
    pub fn td_update(&mut self) -> Result<UpdateStats> {
        let sample = self.replay.sample(&mut self.replay_rng, self.cfg.batch)?;
        let obs = obs_batch(sample.iter().map(|t| &t.obs));
        let next = obs_batch(sample.iter().map(|t| &t.next_obs));
        let batch = TdBatch {
            obs: random_shift(&obs, self.cfg.shift_pad, &mut self.shift_rng)?,
            next_obs: random_shift(&next, self.cfg.shift_pad, &mut self.shift_rng)?,
            actions: sample.iter().map(|t| t.action.index()).collect(),
            rewards: sample.iter().map(|t| t.reward).collect(),
            terminal: sample.iter().map(|t| t.terminal).collect(),
        };
        let targets = td_targets(&self.target, &batch, self.cfg.gamma)?;
        let out = td_loss(&self.online, &batch, &targets, &mut self.norm_rng)?;
        self.adam.step(self.online.param_tensors_mut(), &out.grads, self.cfg.lr);
        self.online.encoder.apply_running_stats(out.cache.encoder());
        for (name, t) in self.online.param_tensors() {
            t.check_finite(&format!("parameter {name} after update"))?;
        }
        soft_update(&mut self.target, &self.online, self.cfg.tau);
        self.updates += 1;
        let mean_q = targets.iter().map(|&v| v as f64).sum::<f64>() / targets.len() as f64;
        Ok(UpdateStats {
            loss: out.loss as f64,
            mean_q,
        })
    }
}

/// One randomized finite-difference trial of the TD loss on a 4-transition batch.
pub fn td_loss_gradcheck_trial(eps: f64, scale: f64, rng: &mut Prng) -> Result<(GradCheckReport, String)> {
    use crate::encoder::{ConvSpec, NormVariant};
    use crate::normlayers::{CrossNormConfig, SelfNormConfig};
    let variants = [NormVariant::Cnsn, NormVariant::None, NormVariant::Bn, NormVariant::CnOnly];
    let norm = variants[rng.below(variants.len() as u64) as usize];
    let layers = rng.int_inclusive(1, 2);
    let side = rng.int_inclusive(6, 8);
    let mut cfg = EncoderConfig {
        input: [rng.int_inclusive(1, 3), side, side],
        layers: (0..layers)
            .map(|i| ConvSpec {
                out_channels: 2,
                kernel: 3,
                stride: if i == 0 { 2 } else { 1 },
                pad: 1,
            })
            .collect(),
        norms: vec![norm; layers],
        k_active: 0,
        feature_dim: rng.int_inclusive(3, 5),
        crossnorm: CrossNormConfig {
            crop_enabled: rng.bernoulli(0.5),
            ..CrossNormConfig::default()
        },
        selfnorm: SelfNormConfig {
            init_output_bias: 1.0,
            init_scale: 0.5,
            ..SelfNormConfig::default()
        },
        ..EncoderConfig::default()
    };
    cfg.k_active = cfg.crossnorm_layers();
    let online = QNet::<f64>::new(&cfg, &mut rng.split_named("online"))?;
    let target = QNet::<f64>::new(&cfg, &mut rng.split_named("target"))?;
    let n = 4;
    let [c, h, w] = cfg.input;
    let mut obs_rng = rng.split_named("obs");
    let mut draw = |_| obs_rng.uniform();
    let batch = TdBatch {
        obs: Tensor::from_fn(&[n, c, h, w], &mut draw),
        next_obs: Tensor::from_fn(&[n, c, h, w], &mut draw),
        actions: (0..n).map(|_| rng.below(Action::COUNT as u64) as usize).collect(),
        // Large rewards put some residuals on the linear Huber branch.
        rewards: (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect(),
        terminal: (0..n).map(|_| rng.bernoulli(0.3)).collect(),
    };
    let gamma = 0.99;
    let targets = td_targets(&target, &batch, gamma)?;
    let norm_rng = rng.split_named("norm");
    let base = td_loss(&online, &batch, &targets, &mut norm_rng.clone())?;
    let mut reports = Vec::new();
    let params: Vec<Tensor<f64>> = online.param_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for (ti, (at, grad)) in params.iter().zip(&base.grads).enumerate() {
        let coords = if at.len() <= 12 {
            (0..at.len()).collect()
        } else {
            let mut c = rng.choose_k(at.len(), 12);
            c.sort_unstable();
            c
        };
        reports.push(grad_check_piecewise(
            |p| {
                let mut q = online.clone();
                *q.param_tensors_mut()[ti] = p.clone();
                let out = td_loss(&q, &batch, &targets, &mut norm_rng.clone())?;
                Ok((out.loss, out.signature()))
            },
            at,
            &grad.map(|v| v * scale),
            eps,
            &coords,
        )?);
    }
    let report = reports.into_iter().reduce(GradCheckReport::merge).expect("parameters exist");
    Ok((report, format!("{norm:?} x{layers} input {:?} batch {n}", cfg.input)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ConvSpec, NormVariant};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            input: [2, 6, 6],
            layers: vec![ConvSpec {
                out_channels: 2,
                kernel: 3,
                stride: 2,
                pad: 1,
            }],
            norms: vec![NormVariant::Cnsn],
            k_active: 1,
            feature_dim: 4,
            ..EncoderConfig::default()
        }
    }

    fn batch(rng: &mut Prng, n: usize) -> TdBatch<f64> {
        TdBatch {
            obs: Tensor::from_fn(&[n, 2, 6, 6], |_| rng.uniform()),
            next_obs: Tensor::from_fn(&[n, 2, 6, 6], |_| rng.uniform()),
            actions: (0..n).map(|i| i % 5).collect(),
            rewards: vec![1.0; n],
            terminal: vec![true; n],
        }
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = AgentConfig::default();
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(10_000) - 0.55).abs() < 1e-12);
        assert_eq!(cfg.epsilon(20_000), 0.1);
        assert_eq!(cfg.epsilon(90_000), 0.1);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0f32; 5]), 0);
    }

    #[test]
    fn uniform_exploration() {
        let net = QNet::<f64>::new(&tiny_cfg(), &mut Prng::new(0)).unwrap();
        let obs = Tensor::zeros(&[1, 2, 6, 6]);
        let mut rng = Prng::new(1);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            counts[act(&obs, &net, 1.0, &mut rng).unwrap().index()] += 1;
        }
        let expect = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 99th percentile of chi-squared with 4 degrees of freedom.
        assert!(chi2 < 13.28, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn forced_head_prefers_up() {
        let mut net = QNet::<f64>::new(&tiny_cfg(), &mut Prng::new(0)).unwrap();
        net.head_w = Tensor::zeros(net.head_w.shape());
        net.head_b = Tensor::from_vec(&[5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let obs = Tensor::from_fn(&[1, 2, 6, 6], |i| i as f64 / 72.0);
        assert_eq!(act(&obs, &net, 0.0, &mut Prng::new(3)).unwrap(), Action::Up);
    }

    #[test]
    fn greedy_is_deterministic() {
        let net = QNet::<f64>::new(&tiny_cfg(), &mut Prng::new(4)).unwrap();
        let obs = Tensor::from_fn(&[1, 2, 6, 6], |i| (i % 7) as f64 / 7.0);
        let a = act(&obs, &net, 0.0, &mut Prng::new(0)).unwrap();
        for s in 1..10 {
            assert_eq!(act(&obs, &net, 0.0, &mut Prng::new(s)).unwrap(), a);
        }
    }

    #[test]
    fn perfect_terminal_prediction_has_zero_loss() {
        let mut rng = Prng::new(5);
        let mut net = QNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        net.head_w = Tensor::zeros(net.head_w.shape());
        net.head_b = Tensor::full(&[5], 1.0);
        let b = batch(&mut rng, 4);
        let targets = td_targets(&net, &b, 0.99).unwrap();
        assert_eq!(targets, vec![1.0; 4]);
        let out = td_loss(&net, &b, &targets, &mut rng).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_discount_regresses_on_reward() {
        let mut rng = Prng::new(6);
        let net = QNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        let mut b = batch(&mut rng, 3);
        b.terminal = vec![false; 3];
        b.rewards = vec![0.5, -0.25, 2.0];
        assert_eq!(td_targets(&net, &b, 0.0).unwrap(), b.rewards);
    }

    #[test]
    fn soft_update_recurrence() {
        let cfg = tiny_cfg();
        let mut online = QNet::<f64>::new(&cfg, &mut Prng::new(0)).unwrap();
        for t in online.state_tensors_mut() {
            *t = Tensor::full(t.shape(), 1.0);
        }
        let mut target = online.clone();
        for t in target.state_tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let start = target.clone();
        soft_update(&mut target, &online, 0.0);
        assert_eq!(target, start);
        soft_update(&mut target, &online, 0.5);
        soft_update(&mut target, &online, 0.5);
        for (_, t) in target.state_tensors() {
            assert!(t.data().iter().all(|&v| v == 0.75));
        }
        soft_update(&mut target, &online, 1.0);
        assert_eq!(target, online);
    }

    #[test]
    fn td_loss_rejects_singleton_batch() {
        let mut rng = Prng::new(7);
        let net = QNet::<f64>::new(&tiny_cfg(), &mut rng).unwrap();
        let b = batch(&mut rng, 1);
        assert!(td_loss(&net, &b, &[1.0], &mut rng).is_err());
    }

    #[test]
    fn td_gradients_match_finite_differences() {
        let mut rng = Prng::new(8);
        for _ in 0..3 {
            let (report, shape) = td_loss_gradcheck_trial(1e-5, 1.0, &mut rng).unwrap();
            assert!(report.max_rel_error < 1e-4, "{shape}: {report:?}");
        }
    }

    #[test]
    fn cast_round_trip() {
        let net = QNet::<f32>::new(&EncoderConfig::default().with_norm(NormVariant::Bn), &mut Prng::new(0)).unwrap();
        let back: QNet<f32> = net.cast::<f64>().cast();
        assert_eq!(back, net);
    }
}
