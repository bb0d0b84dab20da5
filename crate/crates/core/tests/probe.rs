//! Scratch probe for tuning training budgets. Run explicitly:
//! `cargo test --release -p rasim-core --test probe -- --ignored --nocapture`

use rasim_core::activity::{gen_synthetic, SyntheticParams};
use rasim_core::agent::EnsembleAgent;
use rasim_core::harness::{drive_hybrid, AgentSection};
use rasim_core::hybrid::{estimate_eps_stats, EpsilonStats, HybridConfig};
use rasim_core::rng::RngStream;

fn probe_one(delta: f64, t_train: usize, t_h: usize, gt: bool, alpha: f64, seed: u64) {
    let k = 20;
    let started = std::time::Instant::now();
    let trace = gen_synthetic(
        &SyntheticParams {
            delta,
            k_nodes: k,
            t_slots: t_train + 3000,
        },
        &mut RngStream::new(seed).fork("traffic"),
    )
    .unwrap();
    let agent_cfg = AgentSection {
        hidden_width: 32,
        t_h,
        alpha,
        ground_truth_feedback: gt,
        ..AgentSection::default()
    };
    let cfg = HybridConfig {
        n_total: 10,
        n_drl: 7,
        m_sequences: 54,
        t_h,
    };
    let root = RngStream::new(seed);
    let mut agent = EnsembleAgent::new(k, agent_cfg.agent_config(), &mut root.fork("init")).unwrap();
    let log = drive_hybrid(
        &mut agent,
        &trace,
        0..t_train,
        &cfg,
        &agent_cfg.slot_options(true),
        true,
        &mut root.fork("train"),
    )
    .unwrap();
    let reward_tail: f64 =
        log.rewards.iter().rev().take(1000).sum::<f64>() / 1000.0;
    let eval = trace.slice_slots(t_train, t_train + 3000).unwrap();
    let stats = estimate_eps_stats(
        &agent,
        &eval,
        &cfg,
        &agent_cfg.slot_options(false),
        &mut root.fork("stats"),
    )
    .unwrap();
    let m = EpsilonStats::mean_of(&stats);
    println!(
        "delta {delta} train {t_train} t_h {t_h} gt {gt} alpha {alpha} seed {seed}: reward_tail {reward_tail:.2} cor {:.2} misA {:.2} misI {:.2} [{:.0}s]",
        m.k_cor_active,
        m.k_mis_active,
        m.k_mis_inactive,
        started.elapsed().as_secs_f64(),
    );
}

#[test]
#[ignore]
fn probe_learning_quality() {
    for delta in [0.2, 0.3, 0.5, 0.7, 0.9] {
        probe_one(delta, 12_000, 4, true, 0.001, 42);
    }
    for seed in [7, 99] {
        probe_one(0.9, 12_000, 4, true, 0.001, seed);
        probe_one(0.1, 12_000, 4, true, 0.001, seed);
    }
}
