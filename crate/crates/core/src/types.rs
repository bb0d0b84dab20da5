//! Domain types shared by every module: node identities, the ground-truth
//! activity matrix, per-slot allocation outcomes, and the packet-rate metric.
//!
//! The cell has `K` nodes and `T` slots. A node that is active in a slot and
//! holds a resource block in that slot delivers exactly one packet (unit data
//! rate); the average packet rate is the fraction of node-slots with a
//! delivered packet.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Index of one IoT node, in `[0, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// K x T binary activity matrix: `active(k, t)` is 1 iff node `k` generates
/// a packet at the start of slot `t`. Stored densely, row per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityTrace {
    k_nodes: usize,
    t_slots: usize,
    active: Vec<u8>,
}

impl ActivityTrace {
    pub fn new(k_nodes: usize, t_slots: usize) -> Self {
        ActivityTrace {
            k_nodes,
            t_slots,
            active: vec![0; k_nodes * t_slots],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        let k_nodes = rows.len();
        let t_slots = rows.first().map_or(0, |r| r.len());
        let mut active = Vec::with_capacity(k_nodes * t_slots);
        for row in &rows {
            if row.len() != t_slots {
                return Err(Error::invalid("rows", "ragged activity matrix"));
            }
            for &v in row {
                if v > 1 {
                    return Err(Error::invalid("active", "entries must be 0 or 1"));
                }
                active.push(v);
            }
        }
        Ok(ActivityTrace {
            k_nodes,
            t_slots,
            active,
        })
    }

    pub fn k_nodes(&self) -> usize {
        self.k_nodes
    }

    pub fn t_slots(&self) -> usize {
        self.t_slots
    }

    pub fn is_active(&self, node: NodeId, slot: usize) -> bool {
        self.active[node.index() * self.t_slots + slot] == 1
    }

    pub fn set_active(&mut self, node: NodeId, slot: usize, value: bool) {
        self.active[node.index() * self.t_slots + slot] = u8::from(value);
    }

    /// Number of active nodes in slot `t` (the per-slot activity count).
    pub fn active_count(&self, slot: usize) -> Result<usize> {
        if slot >= self.t_slots {
            return Err(Error::SlotOutOfRange {
                slot,
                t_slots: self.t_slots,
            });
        }
        Ok((0..self.k_nodes)
            .filter(|&k| self.active[k * self.t_slots + slot] == 1)
            .count())
    }

    /// The set of nodes active in slot `t`.
    pub fn active_set(&self, slot: usize) -> Result<BTreeSet<NodeId>> {
        if slot >= self.t_slots {
            return Err(Error::SlotOutOfRange {
                slot,
                t_slots: self.t_slots,
            });
        }
        Ok((0..self.k_nodes)
            .filter(|&k| self.active[k * self.t_slots + slot] == 1)
            .map(|k| NodeId(k as u32))
            .collect())
    }

    /// All per-slot activity counts.
    pub fn active_counts(&self) -> Vec<usize> {
        (0..self.t_slots)
            .map(|t| self.active_count(t).expect("slot in range"))
            .collect()
    }

    /// Restricted view: slots `[start, end)` copied into a new trace.
    pub fn slice_slots(&self, start: usize, end: usize) -> Result<ActivityTrace> {
        if start > end || end > self.t_slots {
            return Err(Error::invalid("slots", format!("bad range {start}..{end}")));
        }
        let mut out = ActivityTrace::new(self.k_nodes, end - start);
        for k in 0..self.k_nodes {
            for t in start..end {
                out.active[k * (end - start) + (t - start)] =
                    self.active[k * self.t_slots + t];
            }
        }
        Ok(out)
    }

    /// CSV form: first line `K,T`, then one comma-separated row of 0/1 per node.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{},{}", self.k_nodes, self.t_slots);
        for k in 0..self.k_nodes {
            let row: Vec<&str> = (0..self.t_slots)
                .map(|t| {
                    if self.active[k * self.t_slots + t] == 1 {
                        "1"
                    } else {
                        "0"
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::MalformedFile {
            what: "trace csv",
            reason: "empty file".into(),
        })?;
        let mut parts = header.split(',');
        let parse = |s: Option<&str>, name| -> Result<usize> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::MalformedFile {
                    what: "trace csv",
                    reason: format!("bad header field {name}"),
                })
        };
        let k_nodes = parse(parts.next(), "K")?;
        let t_slots = parse(parts.next(), "T")?;
        let mut rows = Vec::with_capacity(k_nodes);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<u8>> = line
                .split(',')
                .map(|v| match v.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::MalformedRecord {
                        line: (i + 2) as u64,
                        reason: format!("expected 0/1, got {other:?}"),
                    }),
                })
                .collect();
            let row = row?;
            if row.len() != t_slots {
                return Err(Error::MalformedRecord {
                    line: (i + 2) as u64,
                    reason: format!("expected {t_slots} entries, got {}", row.len()),
                });
            }
            rows.push(row);
        }
        if rows.len() != k_nodes {
            return Err(Error::MalformedFile {
                what: "trace csv",
                reason: format!("expected {k_nodes} rows, got {}", rows.len()),
            });
        }
        ActivityTrace::from_rows(rows)
    }
}

/// Resource blocks granted in one slot. At most `n_limit` grants (constraint
/// C2: the AP owns N blocks per slot).
#[derive(Debug, Clone)]
pub struct SlotAllocation {
    granted: BTreeSet<NodeId>,
}

impl SlotAllocation {
    pub fn new(granted: BTreeSet<NodeId>, n_limit: usize) -> Result<Self> {
        if granted.len() > n_limit {
            return Err(Error::invalid(
                "granted",
                format!("{} grants exceed {} blocks", granted.len(), n_limit),
            ));
        }
        Ok(SlotAllocation { granted })
    }

    pub fn granted(&self) -> &BTreeSet<NodeId> {
        &self.granted
    }
}

/// Everything that happened in one slot: prediction-stage grants and
/// deliveries, wasted blocks, and the random-access fallback.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotOutcome {
    pub slot: usize,
    pub drl_granted: BTreeSet<NodeId>,
    pub drl_delivered: BTreeSet<NodeId>,
    pub ra_attempted: BTreeSet<NodeId>,
    pub ra_collided: BTreeSet<NodeId>,
    pub ra_delivered: BTreeSet<NodeId>,
    pub wasted_rbs: usize,
}

impl SlotOutcome {
    pub fn delivered_count(&self) -> usize {
        self.drl_delivered.len() + self.ra_delivered.len()
    }

    /// Nodes the access point learned were active this slot: prediction-stage
    /// deliveries plus every node detected on the control channel (a unique
    /// sequence is detectable even when no block is left to grant).
    pub fn observed_active(&self) -> BTreeSet<NodeId> {
        let detected = self.ra_attempted.difference(&self.ra_collided).copied();
        self.drl_delivered.iter().copied().chain(detected).collect()
    }

    /// Structural invariants, checked against the ground-truth active set and
    /// the per-stage block budgets.
    pub fn check_invariants(
        &self,
        active: &BTreeSet<NodeId>,
        n_drl: usize,
        n_ra: usize,
    ) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid("slot outcome", reason));
        if !self.drl_delivered.is_subset(&self.drl_granted) {
            return fail("delivered set not within granted set".into());
        }
        if !self.ra_delivered.is_subset(&self.ra_attempted) {
            return fail("ra delivered set not within attempted set".into());
        }
        if self.ra_collided.intersection(&self.ra_delivered).count() != 0 {
            return fail("a collided node cannot deliver".into());
        }
        if !self.drl_delivered.is_subset(active) || !self.ra_delivered.is_subset(active) {
            return fail("an inactive node delivered a packet".into());
        }
        if self.drl_granted.len() > n_drl {
            return fail(format!("{} grants exceed N1={n_drl}", self.drl_granted.len()));
        }
        if self.ra_delivered.len() > n_ra {
            return fail(format!(
                "{} ra deliveries exceed N2={n_ra}",
                self.ra_delivered.len()
            ));
        }
        if self.wasted_rbs + self.drl_delivered.len() > n_drl {
            return fail("wasted plus delivered blocks exceed N1".into());
        }
        Ok(())
    }
}

/// Per-slot packet rate with its arithmetic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSeries {
    per_slot: Vec<f64>,
    mean: f64,
}

impl RateSeries {
    pub fn new(per_slot: Vec<f64>) -> Self {
        let mean = if per_slot.is_empty() {
            0.0
        } else {
            per_slot.iter().sum::<f64>() / per_slot.len() as f64
        };
        RateSeries { per_slot, mean }
    }

    pub fn per_slot(&self) -> &[f64] {
        &self.per_slot
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// CSV rows `slot,rate`, final line `mean,<value>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slot,rate\n");
        for (t, r) in self.per_slot.iter().enumerate() {
            let _ = writeln!(s, "{t},{r}");
        }
        let _ = writeln!(s, "mean,{}", self.mean);
        s
    }
}

/// Average packet rate of a run: per slot, delivered packets over K; overall,
/// the mean across slots. Delivered means active and granted, so this is the
/// rate metric every scheme is scored by.
pub fn average_packet_rate(outcomes: &[SlotOutcome], k_nodes: usize) -> Result<RateSeries> {
    if outcomes.is_empty() {
        return Err(Error::EmptyOutcomes);
    }
    if k_nodes == 0 {
        return Err(Error::invalid("k_nodes", "must be at least 1"));
    }
    let per_slot = outcomes
        .iter()
        .map(|o| o.delivered_count() as f64 / k_nodes as f64)
        .collect();
    Ok(RateSeries::new(per_slot))
}

/// Rate of the genie allocator that knows the activity matrix: it grants
/// blocks to active nodes until the budget runs out, so each slot delivers
/// `min(K_active, N)` packets. Upper-bounds every implementable scheme.
pub fn genie_rate(trace: &ActivityTrace, n_rbs: usize) -> RateSeries {
    let k = trace.k_nodes().max(1);
    let per_slot = trace
        .active_counts()
        .into_iter()
        .map(|ka| ka.min(n_rbs) as f64 / k as f64)
        .collect();
    RateSeries::new(per_slot)
}
