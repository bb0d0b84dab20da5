//! The deep-Q-aided hybrid scheme: per-slot protocol, the hypergeometric
//! leftover expectation, and the closed-form rate with its block-split
//! selection procedure.
//!
//! Per slot the agent predicts an active set and `N1` of the `N` blocks are
//! granted to predicted nodes (a uniform `N1`-subset when the prediction is
//! larger). Active nodes left without a block - mispredicted as inactive or
//! beaten in the grant lottery - fall back to conventional contention over
//! the remaining `N2 = N - N1` blocks.

use std::collections::BTreeSet;

use num_bigint::BigUint;
use num_traits::cast::ToPrimitive;
use num_traits::{One, Zero};
use statrs::function::gamma::ln_gamma;

use crate::agent::{reward, EnsembleAgent, StateWindow};
use crate::error::{Error, Result};
use crate::ra::{
    expected_ra_deliveries_frac, simulate_ra_contention, verbatim_ra_term, AnalyticMode,
    RaConfig,
};
use crate::rng::RngStream;
use crate::types::{ActivityTrace, NodeId, RateSeries, SlotOutcome};

/// Block split of the hybrid scheme. `N2 = N - N1` is derived, never stored,
/// so the split always sums to the total budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridConfig {
    pub n_total: usize,
    pub n_drl: usize,
    pub m_sequences: usize,
    pub t_h: usize,
}

impl HybridConfig {
    pub fn n_ra(&self) -> usize {
        self.n_total - self.n_drl
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_drl > self.n_total {
            return Err(Error::invalid(
                "n_drl",
                format!("{} exceeds total budget {}", self.n_drl, self.n_total),
            ));
        }
        if self.m_sequences == 0 {
            return Err(Error::invalid("m_sequences", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-slot classification counts harvested against ground truth:
/// how many nodes were predicted active, of those how many truly were, and
/// how many active nodes went unpredicted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonStats {
    pub k_active: f64,
    pub k_cor_active: f64,
    pub k_mis_active: f64,
    pub k_mis_inactive: f64,
}

impl EpsilonStats {
    pub fn new(k_cor_active: f64, k_mis_active: f64, k_mis_inactive: f64) -> Self {
        EpsilonStats {
            k_active: k_cor_active + k_mis_active,
            k_cor_active,
            k_mis_active,
            k_mis_inactive,
        }
    }

    /// Arithmetic mean of a sequence of per-slot stats.
    pub fn mean_of(stats: &[EpsilonStats]) -> EpsilonStats {
        let n = stats.len().max(1) as f64;
        EpsilonStats::new(
            stats.iter().map(|s| s.k_cor_active).sum::<f64>() / n,
            stats.iter().map(|s| s.k_mis_active).sum::<f64>() / n,
            stats.iter().map(|s| s.k_mis_inactive).sum::<f64>() / n,
        )
    }
}

/// Exact binomial coefficient by multiplicative accumulation in arbitrary
/// precision; `y > x` yields 0.
pub fn binom(x: u64, y: u64) -> BigUint {
    if y > x {
        return BigUint::zero();
    }
    let y = y.min(x - y);
    let mut acc = BigUint::one();
    for i in 1..=y {
        acc *= BigUint::from(x - y + i);
        acc /= BigUint::from(i);
    }
    acc
}

fn ln_binom(x: u64, y: u64) -> f64 {
    if y > x {
        return f64::NEG_INFINITY;
    }
    ln_gamma(x as f64 + 1.0) - ln_gamma(y as f64 + 1.0) - ln_gamma((x - y) as f64 + 1.0)
}

/// Threshold above which binomial ratios switch from exact accumulation to
/// the log-gamma route.
const EXACT_BINOM_LIMIT: u64 = 500;

/// `C(k_cor, j) * C(k_mis, r) / C(k_act, n)` as f64, exact below the limit.
fn hypergeom_term(k_cor: u64, j: u64, k_mis: u64, r: u64, k_act: u64, n: u64) -> f64 {
    if k_act <= EXACT_BINOM_LIMIT {
        let num = binom(k_cor, j) * binom(k_mis, r);
        let den = binom(k_act, n);
        let num = num.to_f64().unwrap_or(f64::INFINITY);
        let den = den.to_f64().unwrap_or(f64::INFINITY);
        if den == 0.0 {
            return 0.0;
        }
        num / den
    } else {
        (ln_binom(k_cor, j) + ln_binom(k_mis, r) - ln_binom(k_act, n)).exp()
    }
}

/// Expected number of correctly-predicted-active nodes left without a block
/// when `n_drl` blocks are assigned uniformly among the `k_cor + k_mis`
/// predicted nodes.
///
/// Case-split binomial sum: the first term grants the fewest correct nodes
/// (`n2` of them, weight `n1 = k_cor - n2` leftovers) and the last grants
/// the most (`m2`, weight `m1`), with
/// `n2 = max(0, n_drl - k_mis)` and `m2 = min(k_cor, n_drl)`.
pub fn expected_ungranted_correct(k_cor: u64, k_mis: u64, n_drl: u64) -> f64 {
    let k_act = k_cor + k_mis;
    if k_cor == 0 || n_drl >= k_act {
        return 0.0;
    }
    let n2 = n_drl.saturating_sub(k_mis);
    let m2 = k_cor.min(n_drl);
    let mut total = 0.0;
    for j in n2..=m2 {
        let weight = (k_cor - j) as f64;
        if weight == 0.0 {
            continue;
        }
        total += weight * hypergeom_term(k_cor, j, k_mis, n_drl - j, k_act, n_drl);
    }
    total
}

/// Hypergeometric closed form of the same expectation,
/// `k_cor * max(0, 1 - n_drl / (k_cor + k_mis))`; defined for fractional
/// inputs and used as the cross-check route.
pub fn no_rb_closed_form(k_cor: f64, k_mis: f64, n_drl: f64) -> f64 {
    let k_act = k_cor + k_mis;
    if k_act <= 0.0 {
        return 0.0;
    }
    k_cor * (1.0 - n_drl / k_act).max(0.0)
}

/// What the protocol feeds back into agent state and reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotOptions {
    /// Use the epsilon-greedy schedule (training) rather than pure greedy.
    pub explore: bool,
    /// Diagnostic mode: feed ground-truth activity into windows and rewards
    /// instead of what the access point actually observed.
    pub ground_truth_feedback: bool,
}

impl Default for SlotOptions {
    fn default() -> Self {
        SlotOptions {
            explore: true,
            ground_truth_feedback: false,
        }
    }
}

/// Per-group record of one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStep {
    pub action_index: usize,
    pub reward: f64,
}

/// Outcome of one hybrid slot: the allocation record, the advanced history
/// windows, and the per-group actions and rewards.
#[derive(Debug, Clone)]
pub struct HybridSlotResult {
    pub outcome: SlotOutcome,
    pub windows: Vec<StateWindow>,
    pub per_group: Vec<GroupStep>,
    pub total_reward: f64,
    pub predicted: BTreeSet<NodeId>,
}

/// One slot of the hybrid protocol.
pub fn run_slot(
    agent: &EnsembleAgent,
    windows: &[StateWindow],
    active: &BTreeSet<NodeId>,
    cfg: &HybridConfig,
    opts: &SlotOptions,
    rng: &mut RngStream,
) -> Result<HybridSlotResult> {
    cfg.validate()?;
    let actions = if opts.explore {
        agent.decide(windows, rng)?
    } else {
        agent.decide_greedy(windows)?
    };
    let predicted = agent.predicted_set(&actions);

    let granted: BTreeSet<NodeId> = if predicted.len() <= cfg.n_drl {
        predicted.clone()
    } else {
        let pool: Vec<NodeId> = predicted.iter().copied().collect();
        rand::seq::index::sample(rng, pool.len(), cfg.n_drl)
            .iter()
            .map(|i| pool[i])
            .collect()
    };

    let drl_delivered: BTreeSet<NodeId> = granted.intersection(active).copied().collect();
    let wasted = granted.len() - drl_delivered.len();

    // Every active node without a block contends: mispredicted-inactive
    // nodes plus correctly predicted ones that lost the grant lottery.
    let fallback: BTreeSet<NodeId> = active.difference(&granted).copied().collect();
    let ra = simulate_ra_contention(
        &fallback,
        &RaConfig {
            m_sequences: cfg.m_sequences,
            n_rbs: cfg.n_ra(),
        },
        rng,
    );

    let outcome = SlotOutcome {
        slot: 0,
        drl_granted: granted,
        drl_delivered,
        ra_attempted: ra.ra_attempted,
        ra_collided: ra.ra_collided,
        ra_delivered: ra.ra_delivered,
        wasted_rbs: wasted,
    };

    let feedback: BTreeSet<NodeId> = if opts.ground_truth_feedback {
        active.clone()
    } else {
        outcome.observed_active()
    };

    let mut per_group = Vec::with_capacity(agent.groups().len());
    let mut next_windows = Vec::with_capacity(agent.groups().len());
    let mut total_reward = 0.0;
    for (g, members) in agent.groups().iter().enumerate() {
        let group: BTreeSet<NodeId> = members.iter().copied().collect();
        let r = reward(&predicted, &feedback, &group);
        total_reward += r;
        per_group.push(GroupStep {
            action_index: actions[g],
            reward: r,
        });
        let newest: Vec<u8> = members
            .iter()
            .map(|n| u8::from(feedback.contains(n)))
            .collect();
        next_windows.push(windows[g].shifted(&newest));
    }

    Ok(HybridSlotResult {
        outcome,
        windows: next_windows,
        per_group,
        total_reward,
        predicted,
    })
}

/// Analytic rate of the hybrid scheme over per-slot classification stats.
///
/// Per slot, the expected contender count of the fallback stage is
/// `V = k_mis_inactive + E[correct-but-ungranted]`, the latter from the
/// case-split sum with `k_cor`/`k_mis` rounded to nearest integers. The
/// fallback term follows the conventional-scheme formula with `N2` and `V`
/// in place of `N` and the active count. The simulation-consistent mode
/// additionally credits the prediction-stage deliveries so the result is
/// comparable to measured packet rates; the verbatim mode reproduces the
/// printed fallback-only expression.
pub fn analytic_hybrid_rate(
    stats: &[EpsilonStats],
    cfg: &HybridConfig,
    k_nodes: usize,
    mode: AnalyticMode,
) -> Result<RateSeries> {
    cfg.validate()?;
    if k_nodes == 0 {
        return Err(Error::invalid("k_nodes", "must be at least 1"));
    }
    let k = k_nodes as f64;
    let per_slot = stats
        .iter()
        .map(|s| {
            let kc = s.k_cor_active.max(0.0).round() as u64;
            let km = s.k_mis_active.max(0.0).round() as u64;
            let norb = expected_ungranted_correct(kc, km, cfg.n_drl as u64);
            let v = s.k_mis_inactive.max(0.0) + norb;
            match mode {
                AnalyticMode::Verbatim => {
                    if v > 0.0 {
                        verbatim_ra_term(v, cfg.m_sequences, cfg.n_ra()) / k
                    } else {
                        0.0
                    }
                }
                AnalyticMode::SimConsistent => {
                    let drl_credit = kc as f64 - norb;
                    let ra = expected_ra_deliveries_frac(v, cfg.m_sequences, cfg.n_ra());
                    (drl_credit + ra) / k
                }
            }
        })
        .collect();
    Ok(RateSeries::new(per_slot))
}

/// Replay a trace through a frozen agent (greedy, no learning), recording
/// per-slot classification counts against ground truth. Windows evolve under
/// the same feedback mode the protocol uses.
pub fn estimate_eps_stats(
    agent: &EnsembleAgent,
    trace: &ActivityTrace,
    cfg: &HybridConfig,
    opts: &SlotOptions,
    rng: &mut RngStream,
) -> Result<Vec<EpsilonStats>> {
    let mut windows = agent.fresh_windows();
    let eval_opts = SlotOptions {
        explore: false,
        ..*opts
    };
    let mut stats = Vec::with_capacity(trace.t_slots());
    for t in 0..trace.t_slots() {
        let active = trace.active_set(t)?;
        let res = run_slot(agent, &windows, &active, cfg, &eval_opts, rng)?;
        let cor = res.predicted.intersection(&active).count() as f64;
        let mis_active = res.predicted.difference(&active).count() as f64;
        let mis_inactive = active.difference(&res.predicted).count() as f64;
        stats.push(EpsilonStats::new(cor, mis_active, mis_inactive));
        windows = res.windows;
    }
    Ok(stats)
}

/// Choose the block split: evaluate the simulation-consistent analytic rate
/// for every `N1` in `0..=N` and return the argmax, ties to the smaller
/// split.
pub fn select_n1(
    stats: &[EpsilonStats],
    n_total: usize,
    m_sequences: usize,
    k_nodes: usize,
) -> Result<usize> {
    let mut best = 0usize;
    let mut best_rate = f64::NEG_INFINITY;
    for n1 in 0..=n_total {
        let cfg = HybridConfig {
            n_total,
            n_drl: n1,
            m_sequences,
            t_h: 1,
        };
        let rate = analytic_hybrid_rate(stats, &cfg, k_nodes, AnalyticMode::SimConsistent)?;
        if rate.mean() > best_rate {
            best_rate = rate.mean();
            best = n1;
        }
    }
    Ok(best)
}

/// Per-slot stats to CSV:
/// `slot,k_active,k_cor_active,k_mis_active,k_mis_inactive`.
pub fn stats_to_csv(stats: &[EpsilonStats]) -> String {
    let mut s = String::from("slot,k_active,k_cor_active,k_mis_active,k_mis_inactive\n");
    for (t, st) in stats.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            t, st.k_active, st.k_cor_active, st.k_mis_active, st.k_mis_inactive
        ));
    }
    s
}

pub fn stats_from_csv(text: &str) -> Result<Vec<EpsilonStats>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::MalformedRecord {
                line: (i + 1) as u64,
                reason: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::MalformedRecord {
                line: (i + 1) as u64,
                reason: format!("bad number {s:?}"),
            })
        };
        let cor = num(fields[2])?;
        let mis_a = num(fields[3])?;
        let mis_i = num(fields[4])?;
        out.push(EpsilonStats::new(cor, mis_a, mis_i));
    }
    Ok(out)
}

/// Stream per-slot results to CSV:
/// `slot,drl_granted,drl_delivered,wasted,ra_attempted,ra_collided,ra_delivered,reward`.
pub fn slot_results_csv(results: &[HybridSlotResult]) -> String {
    let mut s =
        String::from("slot,drl_granted,drl_delivered,wasted,ra_attempted,ra_collided,ra_delivered,reward\n");
    for (t, r) in results.iter().enumerate() {
        let o = &r.outcome;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            t,
            o.drl_granted.len(),
            o.drl_delivered.len(),
            o.wasted_rbs,
            o.ra_attempted.len(),
            o.ra_collided.len(),
            o.ra_delivered.len(),
            r.total_reward,
        ));
    }
    s
}
