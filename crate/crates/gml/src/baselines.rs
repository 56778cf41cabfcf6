//! Comparison trainers: FedAvg, pooled, and individual training.
//!
//! All three reuse the gossip module's local-epoch engine and event-log
//! format, so message accounting and determinism are directly comparable
//! with the gossip protocol. FedAvg moves `2N` messages per aggregation
//! round (N uploads, N downloads); pooled and individual move none.

use crate::error::{GmlError, Result};
use crate::gossip::{train_local_epoch, EventKind, EventLog, Schedule, SiteState};
use crate::losses::LossConfig;
use crate::model::{checkpoint_len, ModelWeights};
use crate::rng::Rng;
use crate::synth::Case;

/// Sample-size-weighted parameter mean: `sum_i (alpha_i / sum alpha) theta_i`.
pub fn fedavg_aggregate(client_models: &[ModelWeights], alphas: &[usize]) -> Result<ModelWeights> {
    if client_models.len() != alphas.len() {
        return Err(GmlError::ShapeMismatch(format!(
            "{} models vs {} alphas",
            client_models.len(),
            alphas.len()
        )));
    }
    let first = client_models.first().ok_or(GmlError::NoSites(0))?;
    if let Some(m) = client_models.iter().find(|m| m.arch != first.arch) {
        return Err(GmlError::IncompatibleModels(format!(
            "client architectures differ: {:?} vs {:?}",
            first.arch, m.arch
        )));
    }
    if alphas.contains(&0) {
        return Err(GmlError::NoData);
    }
    let total: f64 = alphas.iter().map(|&a| a as f64).sum();
    let mut params = vec![0.0; first.params.len()];
    for (m, &a) in client_models.iter().zip(alphas) {
        let w = a as f64 / total;
        for (acc, &p) in params.iter_mut().zip(&m.params) {
            *acc += w * p;
        }
    }
    Ok(ModelWeights {
        arch: first.arch,
        params,
    })
}

/// Centralized federated averaging over the same round structure as the
/// gossip protocol.
///
/// Warmup rounds are purely local from a common initialization (the caller
/// seeds every site with the same model). Each post-warmup round: every
/// client trains locally, uploads to the server (N messages), the server
/// aggregates by sample size and redistributes (N messages). Clients restart
/// their optimizer state after each download, since only weights travel.
pub fn run_fedavg(
    mut sites: Vec<SiteState>,
    sched: &Schedule,
    loss_cfg: &LossConfig,
) -> Result<(ModelWeights, EventLog)> {
    if sites.is_empty() {
        return Err(GmlError::NoSites(0));
    }
    sched.validate()?;
    let alphas: Vec<usize> = sites.iter().map(|s| s.alpha).collect();
    let ckpt_bytes = checkpoint_len(&sites[0].model.arch);
    let mut log = EventLog::new();
    let mut global = sites[0].model.clone();
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
        for site in sites.iter() {
            log.push(
                round,
                EventKind::Upload,
                Some(&site.site_id),
                Some("server"),
                ckpt_bytes,
                1,
            );
        }
        let models: Vec<ModelWeights> = sites.iter().map(|s| s.model.clone()).collect();
        global = fedavg_aggregate(&models, &alphas)?;
        log::debug!("round {round}: averaged {} site models", models.len());
        for site in sites.iter_mut() {
            log.push(
                round,
                EventKind::Download,
                Some("server"),
                Some(&site.site_id),
                ckpt_bytes,
                1,
            );
            site.model = global.clone();
            site.opt = site.opt.fresh();
        }
    }
    Ok((global, log))
}

/// Trains one model on the shuffled union of all sites' training cases for
/// `total_rounds * local_epochs_per_round` passes. Zero network messages.
///
/// The union is concatenated in the given site order and reshuffled every
/// epoch from a dedicated per-epoch stream of `pool_rng`, so the data order
/// is independent of everything else in the run.
pub fn run_pooled(
    union: &[Case],
    sched: &Schedule,
    loss_cfg: &LossConfig,
    model: ModelWeights,
    opt: crate::model::OptState,
    pool_rng: &Rng,
) -> Result<(ModelWeights, EventLog)> {
    if union.is_empty() {
        return Err(GmlError::NoData);
    }
    sched.validate()?;
    let mut model = model;
    let mut opt = opt;
    let mut log = EventLog::new();
    let mut epoch = 0usize;
    for round in 1..=sched.total_rounds {
        for _ in 0..sched.local_epochs_per_round {
            let mut order: Vec<usize> = (0..union.len()).collect();
            pool_rng
                .child(&format!("epoch/{epoch}"))
                .shuffle(&mut order);
            let shuffled: Vec<Case> = order.iter().map(|&i| union[i].clone()).collect();
            (model, opt) = train_local_epoch(model, opt, &shuffled, loss_cfg.eps)?;
            log.push(round, EventKind::LocalEpoch, Some("pooled"), None, 0, 0);
            epoch += 1;
        }
    }
    Ok((model, log))
}

/// Fully isolated per-site training: every site runs the complete schedule
/// on its own data, never exchanging anything. Zero network messages.
///
/// Structurally identical to the gossip run with the gossip phase removed,
/// so with equal initial states the resulting models are bitwise equal to a
/// full-warmup gossip run.
pub fn run_individual(
    mut sites: Vec<SiteState>,
    sched: &Schedule,
    loss_cfg: &LossConfig,
) -> Result<(Vec<SiteState>, EventLog)> {
    if sites.is_empty() {
        return Err(GmlError::NoSites(0));
    }
    sched.validate()?;
    let mut log = EventLog::new();
    for round in 1..=sched.total_rounds {
        for site in sites.iter_mut() {
            for _ in 0..sched.local_epochs_per_round {
                let placeholder = ModelWeights::zeros(site.model.arch)?;
                let model = std::mem::replace(&mut site.model, placeholder);
                let opt = site.opt.clone();
                let (model, opt) = train_local_epoch(model, opt, &site.train.cases, loss_cfg.eps)?;
                site.model = model;
                site.opt = opt;
                log.push(round, EventKind::LocalEpoch, Some(&site.site_id), None, 0, 0);
            }
        }
    }
    Ok((sites, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::{communication_totals, run_gml, GossipMode};
    use crate::model::{checkpoint_write, ArchSpec, OptState};
    use crate::synth::{generate_site, Dataset, SiteGenSpec};

    fn scalar_model(value: f64) -> ModelWeights {
        let arch = ArchSpec {
            spatial_rank: 2,
            in_channels: 1,
            hidden_channels: 1,
            kernel: 1,
        };
        ModelWeights {
            arch,
            params: vec![value; 4],
        }
    }

    fn site(id: &str, n_cases: usize, seed: u64, model: ModelWeights) -> SiteState {
        let spec = SiteGenSpec {
            site_id: id.into(),
            n_cases,
            blob_radius_range: [2.0, 3.0],
            tumor_intensity: 2.5,
            background_noise_sigma: 0.5,
            contrast_scale: 1.0,
            tumor_free_fraction: 0.0,
        };
        let mut rng = Rng::derive(seed, &format!("data/site/{id}"));
        let data = generate_site(&spec, 12, &mut rng).unwrap();
        let opt = OptState::adam(1e-3, model.params.len());
        let val = Dataset {
            site_id: id.into(),
            cases: vec![],
        };
        SiteState::new(data, val, model, opt).unwrap()
    }

    fn shared_init_sites(seed: u64) -> Vec<SiteState> {
        let arch = ArchSpec {
            hidden_channels: 3,
            ..ArchSpec::default()
        };
        let mut init = Rng::derive(seed, "init/global");
        let model = ModelWeights::init(arch, &mut init).unwrap();
        vec![
            site("a", 3, seed, model.clone()),
            site("b", 4, seed, model.clone()),
            site("c", 5, seed, model),
        ]
    }

    #[test]
    fn aggregate_weighted_mean_by_hand() {
        // alpha = [1, 3] over scalar params 0 and 4: (1*0 + 3*4) / 4 = 3.
        let out = fedavg_aggregate(&[scalar_model(0.0), scalar_model(4.0)], &[1, 3]).unwrap();
        assert!(out.params.iter().all(|&p| (p - 3.0).abs() < 1e-15));
        // Equal weights: plain mean.
        let out = fedavg_aggregate(&[scalar_model(2.0), scalar_model(4.0)], &[1, 1]).unwrap();
        assert!(out.params.iter().all(|&p| (p - 3.0).abs() < 1e-15));
    }

    #[test]
    fn aggregate_of_identical_clients_is_identity() {
        let m = scalar_model(1.25);
        let out = fedavg_aggregate(&[m.clone(), m.clone(), m.clone()], &[2, 5, 9]).unwrap();
        assert_eq!(out.params, m.params);
    }

    #[test]
    fn aggregate_is_permutation_equivariant_and_elementwise_convex() {
        let a = scalar_model(-1.0);
        let b = scalar_model(0.5);
        let c = scalar_model(2.0);
        let fwd = fedavg_aggregate(&[a.clone(), b.clone(), c.clone()], &[3, 4, 5]).unwrap();
        let rev = fedavg_aggregate(&[c.clone(), a.clone(), b.clone()], &[5, 3, 4]).unwrap();
        for (x, y) in fwd.params.iter().zip(&rev.params) {
            assert!((x - y).abs() < 1e-15);
        }
        for (i, &p) in fwd.params.iter().enumerate() {
            let lo = a.params[i].min(b.params[i]).min(c.params[i]);
            let hi = a.params[i].max(b.params[i]).max(c.params[i]);
            assert!(p >= lo - 1e-15 && p <= hi + 1e-15);
        }
    }

    #[test]
    fn aggregate_rejects_mismatches() {
        let a = scalar_model(0.0);
        let b = ModelWeights::zeros(ArchSpec::default()).unwrap();
        assert!(matches!(
            fedavg_aggregate(&[a.clone(), b], &[1, 1]),
            Err(GmlError::IncompatibleModels(_))
        ));
        assert!(matches!(
            fedavg_aggregate(&[a], &[1, 2]),
            Err(GmlError::ShapeMismatch(_))
        ));
        assert!(matches!(
            fedavg_aggregate(&[], &[]),
            Err(GmlError::NoSites(0))
        ));
    }

    #[test]
    fn fedavg_message_accounting_is_2n_per_aggregation_round() {
        let sched = Schedule {
            total_rounds: 7,
            warmup_rounds: 3,
            ..Schedule::default()
        };
        let sites = shared_init_sites(31);
        let (_, log) = run_fedavg(sites, &sched, &LossConfig::default()).unwrap();
        let totals = communication_totals(log.events());
        // 4 aggregation rounds * 2 * 3 sites.
        assert_eq!(totals.messages, 24);
        let uploads = log
            .events()
            .iter()
            .filter(|e| e.kind == EventKind::Upload)
            .count();
        let downloads = log
            .events()
            .iter()
            .filter(|e| e.kind == EventKind::Download)
            .count();
        assert_eq!((uploads, downloads), (12, 12));
        // No messages during warmup.
        assert!(log
            .events()
            .iter()
            .filter(|e| e.round <= sched.warmup_rounds)
            .all(|e| e.messages == 0));
    }

    #[test]
    fn fedavg_zero_learning_rate_returns_the_initialization() {
        let sched = Schedule {
            total_rounds: 4,
            warmup_rounds: 1,
            ..Schedule::default()
        };
        let mut sites = shared_init_sites(32);
        let init = sites[0].model.clone();
        for s in sites.iter_mut() {
            s.opt = OptState::sgd(0.0, 0.0, s.model.params.len());
        }
        let (global, _) = run_fedavg(sites, &sched, &LossConfig::default()).unwrap();
        // Weighted averaging of identical params reintroduces rounding at the
        // last ulp (the weights 4/12 and 5/12 are not exact), so compare up
        // to that noise rather than bitwise.
        for (g, i) in global.params.iter().zip(&init.params) {
            assert!((g - i).abs() <= 1e-15 * i.abs().max(1.0), "{g} vs {i}");
        }
    }

    #[test]
    fn fedavg_single_site_equals_local_training() {
        let sched = Schedule {
            total_rounds: 4,
            warmup_rounds: 1,
            ..Schedule::default()
        };
        let arch = ArchSpec {
            hidden_channels: 3,
            ..ArchSpec::default()
        };
        let mut init = Rng::derive(33, "init/global");
        let model = ModelWeights::init(arch, &mut init).unwrap();
        let solo = site("solo", 4, 33, model.clone());
        let reference_cases = solo.train.cases.clone();
        let (global, log) = run_fedavg(vec![solo], &sched, &LossConfig::default()).unwrap();

        // Aggregating one client is the identity, but each post-warmup
        // download resets the optimizer; replicate that exactly.
        let mut m = model;
        let mut o = OptState::adam(1e-3, m.params.len());
        for round in 1..=sched.total_rounds {
            (m, o) = train_local_epoch(m, o, &reference_cases, 1e-5).unwrap();
            if round > sched.warmup_rounds {
                o = o.fresh();
            }
        }
        assert_eq!(global.params, m.params);
        assert_eq!(communication_totals(log.events()).messages, 2 * 3);
    }

    #[test]
    fn pooled_training_reduces_task_loss_and_moves_no_messages() {
        let sites = shared_init_sites(34);
        let union: Vec<Case> = sites
            .iter()
            .flat_map(|s| s.train.cases.iter().cloned())
            .collect();
        let sched = Schedule {
            total_rounds: 12,
            warmup_rounds: 0,
            ..Schedule::default()
        };
        let model = sites[0].model.clone();
        let opt = OptState::adam(1e-3, model.params.len());
        let loss_cfg = LossConfig::default();
        let mean_jd = |m: &ModelWeights| -> f64 {
            union
                .iter()
                .map(|c| {
                    let p = crate::model::forward(m, &c.image).unwrap();
                    crate::losses::jaccard_distance(&p, &c.mask, loss_cfg.eps)
                        .unwrap()
                        .value
                })
                .sum::<f64>()
                / union.len() as f64
        };
        let before = mean_jd(&model);
        let pool_rng = Rng::derive(34, "pooled/shuffle");
        let (trained, log) =
            run_pooled(&union, &sched, &loss_cfg, model, opt, &pool_rng).unwrap();
        let after = mean_jd(&trained);
        assert!(after < before, "pooled loss {after} !< {before}");
        assert_eq!(communication_totals(log.events()).messages, 0);
        assert_eq!(log.events().len(), 12);
    }

    #[test]
    fn pooled_is_deterministic_and_shuffles_per_epoch() {
        let sites = shared_init_sites(35);
        let union: Vec<Case> = sites
            .iter()
            .flat_map(|s| s.train.cases.iter().cloned())
            .collect();
        let sched = Schedule {
            total_rounds: 3,
            warmup_rounds: 0,
            ..Schedule::default()
        };
        let run = || {
            let model = sites[0].model.clone();
            let opt = OptState::adam(1e-3, model.params.len());
            let rng = Rng::derive(35, "pooled/shuffle");
            run_pooled(&union, &sched, &LossConfig::default(), model, opt, &rng)
                .unwrap()
                .0
        };
        assert_eq!(run().params, run().params);
        // A different shuffle stream changes the visit order and the result.
        let model = sites[0].model.clone();
        let opt = OptState::adam(1e-3, model.params.len());
        let other_rng = Rng::derive(36, "pooled/shuffle");
        let (other, _) =
            run_pooled(&union, &sched, &LossConfig::default(), model, opt, &other_rng).unwrap();
        assert_ne!(run().params, other.params);
    }

    #[test]
    fn individual_matches_full_warmup_gossip_bitwise() {
        let sched_individual = Schedule {
            total_rounds: 5,
            warmup_rounds: 0,
            ..Schedule::default()
        };
        let sched_degenerate = Schedule {
            total_rounds: 5,
            warmup_rounds: 5,
            gossip_mode: GossipMode::Single,
            ..Schedule::default()
        };
        let (ind, ind_log) =
            run_individual(shared_init_sites(36), &sched_individual, &LossConfig::default())
                .unwrap();
        let rng = Rng::derive(36, "protocol");
        let (gml, _) = run_gml(
            shared_init_sites(36),
            &sched_degenerate,
            &LossConfig::default(),
            &rng,
        )
        .unwrap();
        for (a, b) in ind.iter().zip(&gml) {
            assert_eq!(
                checkpoint_write(&a.model).unwrap(),
                checkpoint_write(&b.model).unwrap(),
                "site {} diverged",
                a.site_id
            );
        }
        assert_eq!(communication_totals(ind_log.events()).messages, 0);
        // Distinct data makes distinct models.
        assert_ne!(ind[0].model.params, ind[1].model.params);
    }
}
