//! The conventional grant-based random-access scheme.
//!
//! Each active node draws one of `M` orthonormal sequences uniformly at
//! random on the control channel. A node is detected iff no other active
//! node drew the same sequence; the AP grants blocks to detected nodes, at
//! most `N` of them (chosen uniformly when detections exceed the budget).
//! Collided nodes are lost for the slot - there is a single contention round.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{NodeId, RateSeries, SlotOutcome};

/// Contention parameters: `M` orthonormal sequences, `N` resource blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaConfig {
    pub m_sequences: usize,
    pub n_rbs: usize,
}

impl RaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_sequences == 0 {
            return Err(Error::invalid("m_sequences", "must be at least 1"));
        }
        Ok(())
    }
}

/// How the analytic rate treats the capped contention stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticMode {
    /// The printed closed form: per-slot term
    /// `min{ p, N / (K_a * p) }` with `p = (1 - 1/M)^(K_a - 1)`,
    /// averaged over slots and divided by K. The second argument is
    /// reproduced unclamped.
    Verbatim,
    /// Exact expected deliveries per slot, `E[min(U, N)] / K` where `U` is
    /// the number of nodes that drew a unique sequence. This is the value
    /// the Monte Carlo simulation converges to, including at operating
    /// points where the block budget truncates the detection distribution.
    SimConsistent,
}

/// One slot of contention among `active` nodes.
pub fn simulate_ra_contention(
    active: &BTreeSet<NodeId>,
    cfg: &RaConfig,
    rng: &mut RngStream,
) -> SlotOutcome {
    debug_assert!(cfg.m_sequences >= 1);
    let nodes: Vec<NodeId> = active.iter().copied().collect();
    let draws: Vec<usize> = nodes
        .iter()
        .map(|_| rng.gen_range(0..cfg.m_sequences))
        .collect();

    let mut per_sequence = vec![0usize; cfg.m_sequences];
    for &s in &draws {
        per_sequence[s] += 1;
    }

    let mut detected = Vec::new();
    let mut collided = BTreeSet::new();
    for (node, &seq) in nodes.iter().zip(&draws) {
        if per_sequence[seq] == 1 {
            detected.push(*node);
        } else {
            collided.insert(*node);
        }
    }

    let delivered: BTreeSet<NodeId> = if detected.len() > cfg.n_rbs {
        rand::seq::index::sample(rng, detected.len(), cfg.n_rbs)
            .iter()
            .map(|i| detected[i])
            .collect()
    } else {
        detected.iter().copied().collect()
    };

    SlotOutcome {
        slot: 0,
        ra_attempted: active.clone(),
        ra_collided: collided,
        ra_delivered: delivered,
        ..SlotOutcome::default()
    }
}

/// Probability that a given node's sequence draw survives contention when
/// `n_active` nodes contend over `m_sequences`: `(1 - 1/M)^(n_active - 1)`.
/// Degenerate `n_active = 0` returns 1.
pub fn collision_free_prob(n_active: usize, m_sequences: usize) -> Result<f64> {
    if m_sequences == 0 {
        return Err(Error::invalid("m_sequences", "must be at least 1"));
    }
    if n_active == 0 {
        return Ok(1.0);
    }
    Ok((1.0 - 1.0 / m_sequences as f64).powi(n_active as i32 - 1))
}

/// Distribution of the unique-sequence count when `n_active` nodes each draw
/// one of `m` sequences uniformly. Entry `u` is `P(U = u)`.
///
/// Computed box-by-box: with `r` draws left over `m` remaining sequences,
/// the occupancy of the next sequence is Binomial(r, 1/m). All terms are
/// nonnegative, so the recursion is numerically stable.
pub fn unique_count_distribution(n_active: usize, m: usize) -> Vec<f64> {
    assert!(m >= 1);
    // dist[r][u] for the current number of remaining boxes.
    // Start from one box: all r remaining balls land in it.
    let mut dist: Vec<Vec<f64>> = (0..=n_active)
        .map(|r| {
            let mut d = vec![0.0; n_active + 1];
            d[usize::from(r == 1)] = 1.0;
            if r == 0 {
                d[0] = 1.0;
                d.iter_mut().skip(1).for_each(|x| *x = 0.0);
            }
            d
        })
        .collect();

    for boxes in 2..=m {
        let p = 1.0 / boxes as f64;
        let q = 1.0 - p;
        let mut next = vec![vec![0.0; n_active + 1]; n_active + 1];
        for r in 0..=n_active {
            // pmf of Binomial(r, 1/boxes) via the usual ratio recurrence.
            let mut pmf = q.powi(r as i32);
            for c in 0..=r {
                if pmf > 0.0 {
                    let rest = &dist[r - c];
                    let bump = usize::from(c == 1);
                    for u in 0..=(n_active - bump) {
                        if rest[u] != 0.0 {
                            next[r][u + bump] += pmf * rest[u];
                        }
                    }
                }
                if c < r {
                    pmf = pmf * (r - c) as f64 / (c + 1) as f64 * p / q;
                }
            }
        }
        dist = next;
    }
    dist.swap_remove(n_active)
}

/// Exact expected deliveries for one contention slot: `E[min(U, n_rbs)]`.
pub fn expected_ra_deliveries(n_active: usize, m: usize, n_rbs: usize) -> f64 {
    if n_active == 0 || n_rbs == 0 {
        return 0.0;
    }
    unique_count_distribution(n_active, m)
        .iter()
        .enumerate()
        .map(|(u, p)| u.min(n_rbs) as f64 * p)
        .sum()
}

/// Exact per-slot variance of the delivered count, `Var[min(U, n_rbs)]`.
pub fn ra_delivery_variance(n_active: usize, m: usize, n_rbs: usize) -> f64 {
    if n_active == 0 || n_rbs == 0 {
        return 0.0;
    }
    let dist = unique_count_distribution(n_active, m);
    let mean: f64 = dist
        .iter()
        .enumerate()
        .map(|(u, p)| u.min(n_rbs) as f64 * p)
        .sum();
    let second: f64 = dist
        .iter()
        .enumerate()
        .map(|(u, p)| (u.min(n_rbs) as f64).powi(2) * p)
        .sum();
    (second - mean * mean).max(0.0)
}

/// Expected deliveries at a fractional contender count, linearly
/// interpolated between the neighbouring integer counts. Exact at integers.
pub fn expected_ra_deliveries_frac(v: f64, m: usize, n_rbs: usize) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let lo = v.floor() as usize;
    let hi = v.ceil() as usize;
    let a = expected_ra_deliveries(lo, m, n_rbs);
    if hi == lo {
        return a;
    }
    let b = expected_ra_deliveries(hi, m, n_rbs);
    a + (b - a) * (v - lo as f64)
}

/// The printed per-slot term of the random-access rate formula, unclamped,
/// at a possibly fractional contender count. Zero-contender slots yield 0.
pub fn verbatim_ra_term(v: f64, m: usize, n_rbs: usize) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let p = (1.0 - 1.0 / m as f64).powf(v - 1.0);
    let capped = n_rbs as f64 / (v * p);
    p.min(capped)
}

/// Analytic rate of the conventional scheme over a sequence of per-slot
/// active counts, in either mode. Slots with no active node contribute 0.
pub fn analytic_ra_rate(
    active_counts: &[usize],
    cfg: &RaConfig,
    k_nodes: usize,
    mode: AnalyticMode,
) -> Result<RateSeries> {
    cfg.validate()?;
    if k_nodes == 0 {
        return Err(Error::invalid("k_nodes", "must be at least 1"));
    }
    let k = k_nodes as f64;
    let mut cache: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    let per_slot = active_counts
        .iter()
        .map(|&ka| {
            if ka == 0 {
                return 0.0;
            }
            match mode {
                AnalyticMode::Verbatim => verbatim_ra_term(ka as f64, cfg.m_sequences, cfg.n_rbs) / k,
                AnalyticMode::SimConsistent => {
                    let e = *cache.entry(ka).or_insert_with(|| {
                        expected_ra_deliveries(ka, cfg.m_sequences, cfg.n_rbs)
                    });
                    e / k
                }
            }
        })
        .collect();
    Ok(RateSeries::new(per_slot))
}
