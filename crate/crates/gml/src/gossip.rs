//! The gossip protocol engine: activation, transfer, mutual learning.
//!
//! A run is a sequence of rounds. Every round each site trains one (or more)
//! local epochs on its own data. During warmup that is all that happens.
//! After warmup each round adds a gossip phase: a sender is activated at
//! random, ships a bitwise copy of its weights to a random other site, and
//! the receiver co-trains its own model and the visiting copy on the
//! receiver's data. The receiver keeps its improved model; the copy is
//! discarded; the sender's live weights are never touched. One checkpoint
//! per round is the entire network traffic.
//!
//! Everything is observable through the event log, which is totally ordered,
//! deterministic given the seed, and serializes to JSON Lines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GmlError, Result};
use crate::losses::{jaccard_distance, mutual_loss_receiver_with, mutual_loss_sender_with, LossConfig};
use crate::model::{
    backward, checkpoint_read, checkpoint_write, forward, opt_step, ModelWeights, OptState,
};
use crate::rng::Rng;
use crate::synth::{Case, Dataset};

/// What happened in one event-log entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Warmup,
    LocalEpoch,
    Activation,
    Transfer,
    MutualLearning,
    Resume,
    Upload,
    Download,
}

/// One protocol event. `bytes` and `messages` are nonzero only for events
/// that move a model across the (simulated) network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GossipEvent {
    pub round: usize,
    pub seq: usize,
    pub kind: EventKind,
    pub sender: Option<String>,
    pub receiver: Option<String>,
    pub bytes: usize,
    pub messages: usize,
}

/// Append-only ordered event log with monotonic sequence numbers.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    events: Vec<GossipEvent>,
}

impl EventLog {
    pub fn new() -> EventLog {
        EventLog::default()
    }

    pub fn push(
        &mut self,
        round: usize,
        kind: EventKind,
        sender: Option<&str>,
        receiver: Option<&str>,
        bytes: usize,
        messages: usize,
    ) {
        self.events.push(GossipEvent {
            round,
            seq: self.events.len(),
            kind,
            sender: sender.map(str::to_owned),
            receiver: receiver.map(str::to_owned),
            bytes,
            messages,
        });
    }

    pub fn events(&self) -> &[GossipEvent] {
        &self.events
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serialization cannot fail"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| GmlError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<GossipEvent>> {
        let text = std::fs::read_to_string(path).map_err(|e| GmlError::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| GmlError::CorruptDataset(format!("event log line: {e}")))
            })
            .collect()
    }
}

/// How senders are activated each post-warmup round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GossipMode {
    /// One sender per round, drawn categorically with probability
    /// proportional to training-set size. Exactly one message per round.
    #[default]
    Single,
    /// Every site flips its own activation coin each round; zero or several
    /// exchanges can happen. One message per round in expectation.
    Bernoulli,
}

/// Round structure shared by all training methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub total_rounds: usize,
    pub warmup_rounds: usize,
    pub local_epochs_per_round: usize,
    pub mutual_epochs: usize,
    pub gossip_mode: GossipMode,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            total_rounds: 60,
            warmup_rounds: 20,
            local_epochs_per_round: 1,
            mutual_epochs: 1,
            gossip_mode: GossipMode::Single,
        }
    }
}

impl Schedule {
    /// Library-level check. `warmup_rounds == total_rounds` is permitted here
    /// (a degenerate run with no gossip phase, useful as a baseline); the
    /// stricter `<` check belongs to configuration validation.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| GmlError::InvalidConfig {
            field: "schedule".into(),
            reason,
        };
        if self.warmup_rounds > self.total_rounds {
            return Err(bad(format!(
                "warmup_rounds ({}) must not exceed total_rounds ({})",
                self.warmup_rounds, self.total_rounds
            )));
        }
        if self.local_epochs_per_round == 0 {
            return Err(bad("local_epochs_per_round must be >= 1".into()));
        }
        if self.mutual_epochs == 0 {
            return Err(bad("mutual_epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn post_warmup_rounds(&self) -> usize {
        self.total_rounds - self.warmup_rounds
    }
}

/// One participating site: its private data, model, and optimizer.
#[derive(Debug, Clone)]
pub struct SiteState {
    pub site_id: String,
    pub train: Dataset,
    pub val: Dataset,
    /// Training sample size; drives activation probability.
    pub alpha: usize,
    pub model: ModelWeights,
    pub opt: OptState,
    pub activation_prob: f64,
    pub paused: bool,
}

impl SiteState {
    pub fn new(train: Dataset, val: Dataset, model: ModelWeights, opt: OptState) -> Result<SiteState> {
        if train.is_empty() {
            return Err(GmlError::NoData);
        }
        Ok(SiteState {
            site_id: train.site_id.clone(),
            alpha: train.len(),
            train,
            val,
            model,
            opt,
            activation_prob: 0.0,
            paused: false,
        })
    }
}

/// Activation probabilities proportional to training-set sizes:
/// `p_i = alpha_i / sum(alpha)`, so they sum to 1 and the expected number of
/// senders per round is exactly one.
pub fn activation_probabilities(alphas: &[usize]) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(GmlError::NoSites(0));
    }
    if alphas.contains(&0) {
        return Err(GmlError::NoData);
    }
    let total: usize = alphas.iter().sum();
    Ok(alphas.iter().map(|&a| a as f64 / total as f64).collect())
}

/// Draws this round's (sender, receiver) pairs.
///
/// Single mode returns exactly one pair; Bernoulli mode lets every site flip
/// its own coin (in site-index order) and may return zero or several pairs.
/// Receivers are uniform over the other sites, so never equal the sender.
pub fn sample_exchanges(
    probs: &[f64],
    mode: GossipMode,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    let n = probs.len();
    if n < 2 {
        return Err(GmlError::NoSites(n));
    }
    let pick_receiver = |sender: usize, rng: &mut Rng| {
        let k = rng.index(n - 1);
        if k >= sender {
            k + 1
        } else {
            k
        }
    };
    match mode {
        GossipMode::Single => {
            let sender = rng.categorical(probs);
            let receiver = pick_receiver(sender, rng);
            Ok(vec![(sender, receiver)])
        }
        GossipMode::Bernoulli => {
            let mut pairs = Vec::new();
            for (sender, &p) in probs.iter().enumerate() {
                if rng.bernoulli(p) {
                    let receiver = pick_receiver(sender, rng);
                    pairs.push((sender, receiver));
                }
            }
            Ok(pairs)
        }
    }
}

/// One pass over `cases` in order: per case, forward, Jaccard-distance
/// gradient, backward, one optimizer step.
pub fn train_local_epoch(
    model: ModelWeights,
    opt: OptState,
    cases: &[Case],
    eps: f64,
) -> Result<(ModelWeights, OptState)> {
    let mut model = model;
    let mut opt = opt;
    for c in cases {
        let pred = forward(&model, &c.image)?;
        let loss = jaccard_distance(&pred, &c.mask, eps)?;
        let grad = backward(&model, &c.image, &loss.grad_wrt_first_prediction)?;
        (model, opt) = opt_step(model, &grad, opt)?;
    }
    Ok((model, opt))
}

/// Regionalized mutual learning at the receiver.
///
/// For `mutual_epochs` passes over the receiver's training cases: both
/// models predict the case, then each takes one optimizer step on its own
/// objective against the other's *current* prediction (predictions are
/// recomputed every step, and the two steps within a step share the same
/// prediction pair, so the update is simultaneous). The visiting copy trains
/// with fresh optimizer state (checkpoints carry weights only) and is
/// dropped when the function returns; only the receiver's model survives.
pub fn mutual_learning_exchange(
    site: &mut SiteState,
    incoming: ModelWeights,
    mutual_epochs: usize,
    loss_cfg: &LossConfig,
) -> Result<()> {
    if incoming.arch != site.model.arch {
        return Err(GmlError::IncompatibleModels(format!(
            "incoming {:?} vs local {:?} at site {}",
            incoming.arch, site.model.arch, site.site_id
        )));
    }
    let mut local = site.model.clone();
    let mut local_opt = site.opt.clone();
    let mut visitor = incoming;
    let mut visitor_opt = site.opt.fresh();
    for _ in 0..mutual_epochs {
        for c in &site.train.cases {
            let p_r = forward(&local, &c.image)?;
            let p_s = forward(&visitor, &c.image)?;
            let loss_r = mutual_loss_receiver_with(&p_r, &p_s, &c.mask, loss_cfg)?;
            let loss_s = mutual_loss_sender_with(&p_s, &p_r, &c.mask, loss_cfg)?;
            let grad_r = backward(&local, &c.image, &loss_r.grad_wrt_first_prediction)?;
            let grad_s = backward(&visitor, &c.image, &loss_s.grad_wrt_first_prediction)?;
            (local, local_opt) = opt_step(local, &grad_r, local_opt)?;
            (visitor, visitor_opt) = opt_step(visitor, &grad_s, visitor_opt)?;
        }
    }
    site.model = local;
    site.opt = local_opt;
    Ok(())
}

/// Runs the full protocol and returns the final per-site states plus the
/// event log. Deterministic given `(sites, sched, seed stream)`: all
/// per-round randomness comes from children of `protocol_rng`, so the
/// outcome does not depend on draw counts elsewhere.
pub fn run_gml(
    mut sites: Vec<SiteState>,
    sched: &Schedule,
    loss_cfg: &LossConfig,
    protocol_rng: &Rng,
) -> Result<(Vec<SiteState>, EventLog)> {
    if sites.len() < 2 {
        return Err(GmlError::NoSites(sites.len()));
    }
    sched.validate()?;
    let alphas: Vec<usize> = sites.iter().map(|s| s.alpha).collect();
    let probs = activation_probabilities(&alphas)?;
    for (site, &p) in sites.iter_mut().zip(&probs) {
        site.activation_prob = p;
    }
    let mut log = EventLog::new();
    for round in 1..=sched.total_rounds {
        let warmup = round <= sched.warmup_rounds;
        let kind = if warmup { EventKind::Warmup } else { EventKind::LocalEpoch };
        for site in sites.iter_mut() {
            for _ in 0..sched.local_epochs_per_round {
                let placeholder = ModelWeights::zeros(site.model.arch)?;
                let model = std::mem::replace(&mut site.model, placeholder);
                let opt = site.opt.clone();
                let (model, opt) = train_local_epoch(model, opt, &site.train.cases, loss_cfg.eps)?;
                site.model = model;
                site.opt = opt;
                log.push(round, kind, Some(&site.site_id), None, 0, 0);
            }
        }
        if warmup {
            continue;
        }
        let mut round_rng = protocol_rng.child(&format!("round/{round}"));
        let pairs = sample_exchanges(&probs, sched.gossip_mode, &mut round_rng)?;
        // Snapshot before any exchange: a site that is both sender and
        // receiver this round must send its pre-exchange weights.
        let snapshots: Vec<Vec<u8>> = sites
            .iter()
            .map(|s| checkpoint_write(&s.model))
            .collect::<Result<_>>()?;
        for (sender, receiver) in pairs {
            let sender_id = sites[sender].site_id.clone();
            let receiver_id = sites[receiver].site_id.clone();
            log::debug!(
                "round {round}: {sender_id} -> {receiver_id} ({} bytes)",
                snapshots[sender].len()
            );
            log.push(round, EventKind::Activation, Some(&sender_id), None, 0, 0);
            log.push(
                round,
                EventKind::Transfer,
                Some(&sender_id),
                Some(&receiver_id),
                snapshots[sender].len(),
                1,
            );
            sites[sender].paused = true;
            let incoming = checkpoint_read(&snapshots[sender])?;
            mutual_learning_exchange(
                &mut sites[receiver],
                incoming,
                sched.mutual_epochs,
                loss_cfg,
            )?;
            log.push(
                round,
                EventKind::MutualLearning,
                Some(&sender_id),
                Some(&receiver_id),
                0,
                0,
            );
            sites[sender].paused = false;
            log.push(round, EventKind::Resume, Some(&sender_id), None, 0, 0);
        }
    }
    Ok((sites, log))
}

/// Network totals over an event slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommTotals {
    pub messages: usize,
    pub bytes: usize,
}

/// Sums message and byte counts; only model-moving events contribute.
pub fn communication_totals(events: &[GossipEvent]) -> CommTotals {
    let mut t = CommTotals::default();
    for e in events {
        t.messages += e.messages;
        t.bytes += e.bytes;
    }
    t
}
