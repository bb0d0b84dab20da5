//! Ground-truth traffic sources: the synthetic periodic-random pattern, a
//! simplified coupled two-state (regular/alarm) process for pretraining, and
//! slotting of real arrival logs into an [`ActivityTrace`].

use std::collections::BTreeMap;
use std::io::Read;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{ActivityTrace, NodeId};

/// Parameters of the periodic-random source. `delta` interpolates between a
/// fully deterministic alternating pattern (0) and i.i.d. fair coins (1):
/// a node is active with probability `1 - delta/2` on even slots and
/// `delta/2` on odd slots. Slot 0 counts as even.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub delta: f64,
    pub k_nodes: usize,
    pub t_slots: usize,
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) || !self.delta.is_finite() {
            return Err(Error::invalid("delta", format!("{} not in [0,1]", self.delta)));
        }
        Ok(())
    }
}

/// Per-node activity probability of the synthetic source at slot `t`.
pub fn synthetic_activity_prob(delta: f64, slot: usize) -> f64 {
    if slot % 2 == 0 {
        1.0 - delta / 2.0
    } else {
        delta / 2.0
    }
}

/// Generate the synthetic periodic-random trace: independent Bernoulli draws
/// per node and slot with the slot-parity probability above.
pub fn gen_synthetic(params: &SyntheticParams, rng: &mut RngStream) -> Result<ActivityTrace> {
    params.validate()?;
    let mut trace = ActivityTrace::new(params.k_nodes, params.t_slots);
    for k in 0..params.k_nodes {
        for t in 0..params.t_slots {
            let p = synthetic_activity_prob(params.delta, t);
            if rng.gen_bool(p) {
                trace.set_active(NodeId(k as u32), t, true);
            }
        }
    }
    Ok(trace)
}

/// Simplified coupled regular/alarm traffic model. Each node carries a
/// two-state Markov chain (regular and alarm reporting); a shared cell-wide
/// driver fires with probability `coupling` per slot and forces every node's
/// effective state to alarm for that slot, which produces the correlated
/// bursts the pretraining source needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmmppParams {
    /// Activity probability while in the regular state.
    pub regular_activity: f64,
    /// Activity probability while in the alarm state.
    pub alarm_activity: f64,
    /// Per-slot transition probability regular -> alarm.
    pub p_regular_to_alarm: f64,
    /// Per-slot transition probability alarm -> regular.
    pub p_alarm_to_regular: f64,
    /// Probability per slot that the shared driver forces alarm cell-wide.
    pub coupling: f64,
}

impl Default for CmmppParams {
    fn default() -> Self {
        CmmppParams {
            regular_activity: 0.1,
            alarm_activity: 0.9,
            p_regular_to_alarm: 0.01,
            p_alarm_to_regular: 0.3,
            coupling: 0.05,
        }
    }
}

impl CmmppParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("regular_activity", self.regular_activity),
            ("alarm_activity", self.alarm_activity),
            ("p_regular_to_alarm", self.p_regular_to_alarm),
            ("p_alarm_to_regular", self.p_alarm_to_regular),
            ("coupling", self.coupling),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::invalid(name, format!("{v} not in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Generate a coupled regular/alarm trace. All chains start in the regular
/// state; per slot the order is: chain transitions, shared-driver draw, then
/// one activity draw per node from its effective state.
pub fn gen_cmmpp(
    params: &CmmppParams,
    k_nodes: usize,
    t_slots: usize,
    rng: &mut RngStream,
) -> Result<ActivityTrace> {
    params.validate()?;
    let mut trace = ActivityTrace::new(k_nodes, t_slots);
    // false = regular, true = alarm
    let mut alarm = vec![false; k_nodes];
    for t in 0..t_slots {
        if t > 0 {
            for state in alarm.iter_mut() {
                let p = if *state {
                    params.p_alarm_to_regular
                } else {
                    params.p_regular_to_alarm
                };
                if rng.gen_bool(p) {
                    *state = !*state;
                }
            }
        }
        let driver = params.coupling > 0.0 && rng.gen_bool(params.coupling);
        for (k, &state) in alarm.iter().enumerate() {
            let effective_alarm = driver || state;
            let p = if effective_alarm {
                params.alarm_activity
            } else {
                params.regular_activity
            };
            if rng.gen_bool(p) {
                trace.set_active(NodeId(k as u32), t, true);
            }
        }
    }
    Ok(trace)
}

/// One arrival record: which node reported, and when.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalRecord {
    pub label: String,
    pub time_s: f64,
}

/// A log of timestamped arrivals, typically parsed from CSV
/// (`node_label,timestamp_seconds` with a one-line header).
#[derive(Debug, Clone, Default)]
pub struct ArrivalLog {
    pub records: Vec<ArrivalRecord>,
}

impl ArrivalLog {
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::MalformedRecord {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 2 {
                return Err(Error::MalformedRecord {
                    line,
                    reason: format!("expected 2 fields, got {}", row.len()),
                });
            }
            let label = row[0].to_string();
            if label.is_empty() {
                return Err(Error::MalformedRecord {
                    line,
                    reason: "empty node label".into(),
                });
            }
            let time_s: f64 = row[1].parse().map_err(|_| Error::MalformedRecord {
                line,
                reason: format!("bad timestamp {:?}", &row[1]),
            })?;
            if !time_s.is_finite() || time_s < 0.0 {
                return Err(Error::MalformedRecord {
                    line,
                    reason: format!("timestamp {time_s} must be nonnegative"),
                });
            }
            records.push(ArrivalRecord { label, time_s });
        }
        Ok(ArrivalLog { records })
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        Self::from_csv_reader(text.as_bytes())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node_label,timestamp_seconds\n");
        for r in &self.records {
            s.push_str(&format!("{},{}\n", r.label, r.time_s));
        }
        s
    }
}

/// Slot an arrival log into a binary activity trace. Nodes are the distinct
/// labels, assigned ids in first-appearance order over the log; slot
/// intervals are half-open `[start + t*d, start + (t+1)*d)`, so an arrival
/// exactly on a boundary belongs to the slot that starts there. Multiple
/// arrivals of one node in one slot collapse to a single 1.
pub fn ingest_trace(
    log: &ArrivalLog,
    slot_duration_s: f64,
    window: (f64, f64),
) -> Result<ActivityTrace> {
    if !(slot_duration_s > 0.0) || !slot_duration_s.is_finite() {
        return Err(Error::invalid("slot_duration_s", "must be positive"));
    }
    let (start, end) = window;
    if !(end > start) {
        return Err(Error::invalid("window", "must satisfy start < end"));
    }
    let t_slots = ((end - start) / slot_duration_s).ceil() as usize;
    if t_slots == 0 {
        return Err(Error::invalid("window", "spans no slots"));
    }

    let mut ids: BTreeMap<&str, u32> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in &log.records {
        if !ids.contains_key(r.label.as_str()) {
            ids.insert(r.label.as_str(), order.len() as u32);
            order.push(r.label.as_str());
        }
    }
    let k_nodes = order.len();

    let mut trace = ActivityTrace::new(k_nodes, t_slots);
    let mut any_in_window = false;
    for r in &log.records {
        if r.time_s < start || r.time_s >= end {
            continue;
        }
        let slot = ((r.time_s - start) / slot_duration_s).floor() as usize;
        if slot >= t_slots {
            continue;
        }
        any_in_window = true;
        let id = ids[r.label.as_str()];
        trace.set_active(NodeId(id), slot, true);
    }
    if !any_in_window {
        return Err(Error::EmptyWindow);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_zero_is_fully_periodic() {
        let params = SyntheticParams {
            delta: 0.0,
            k_nodes: 8,
            t_slots: 10,
        };
        let trace = gen_synthetic(&params, &mut RngStream::new(3)).unwrap();
        for t in 0..10 {
            let expect = if t % 2 == 0 { 8 } else { 0 };
            assert_eq!(trace.active_count(t).unwrap(), expect);
        }
    }

    #[test]
    fn delta_one_is_fair_coin() {
        let params = SyntheticParams {
            delta: 1.0,
            k_nodes: 10,
            t_slots: 20_000,
        };
        let trace = gen_synthetic(&params, &mut RngStream::new(5)).unwrap();
        let total: usize = trace.active_counts().iter().sum();
        let frac = total as f64 / (10.0 * 20_000.0);
        // Binomial(200000, 1/2): three sigma is ~0.0034.
        assert!((frac - 0.5).abs() < 0.005, "fraction {frac}");
        // Both parities behave identically at delta = 1.
        let even: usize = trace.active_counts().iter().step_by(2).sum();
        let odd = total - even;
        assert!((even as f64 - odd as f64).abs() / (total as f64) < 0.02);
    }

    #[test]
    fn delta_small_even_slot_fraction() {
        // delta = 0.2: even-slot activity probability 0.9; Monte Carlo
        // fraction over K=50, T=10^4 must sit within 0.01.
        let params = SyntheticParams {
            delta: 0.2,
            k_nodes: 50,
            t_slots: 10_000,
        };
        let trace = gen_synthetic(&params, &mut RngStream::new(11)).unwrap();
        let counts = trace.active_counts();
        let even_total: usize = counts.iter().step_by(2).sum();
        let even_slots = counts.len().div_ceil(2);
        let frac = even_total as f64 / (50.0 * even_slots as f64);
        assert!((frac - 0.9).abs() < 0.01, "even-slot fraction {frac}");
    }

    #[test]
    fn synthetic_same_seed_identical() {
        let params = SyntheticParams {
            delta: 0.37,
            k_nodes: 13,
            t_slots: 257,
        };
        let a = gen_synthetic(&params, &mut RngStream::new(99)).unwrap();
        let b = gen_synthetic(&params, &mut RngStream::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cmmpp_uncoupled_never_alarms() {
        let params = CmmppParams {
            regular_activity: 0.25,
            alarm_activity: 1.0,
            p_regular_to_alarm: 0.0,
            p_alarm_to_regular: 0.0,
            coupling: 0.0,
        };
        let trace = gen_cmmpp(&params, 20, 5_000, &mut RngStream::new(2)).unwrap();
        let total: usize = trace.active_counts().iter().sum();
        let frac = total as f64 / (20.0 * 5_000.0);
        assert!((frac - 0.25).abs() < 0.01, "iid fraction {frac}");
    }

    #[test]
    fn cmmpp_full_coupling_always_alarm() {
        let params = CmmppParams {
            regular_activity: 0.0,
            alarm_activity: 1.0,
            p_regular_to_alarm: 0.0,
            p_alarm_to_regular: 1.0,
            coupling: 1.0,
        };
        let trace = gen_cmmpp(&params, 7, 50, &mut RngStream::new(8)).unwrap();
        assert!(trace.active_counts().iter().all(|&c| c == 7));
    }

    /// Sample Pearson correlation between two halves of the per-slot counts.
    fn pairwise_node_correlation(trace: &ActivityTrace) -> f64 {
        // Correlation between total activity of the first and second half of
        // the node population, over slots.
        let half = trace.k_nodes() / 2;
        let t = trace.t_slots();
        let mut a = vec![0.0; t];
        let mut b = vec![0.0; t];
        for slot in 0..t {
            let set = trace.active_set(slot).unwrap();
            for n in set {
                if n.index() < half {
                    a[slot] += 1.0;
                } else {
                    b[slot] += 1.0;
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..t {
            cov += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma).powi(2);
            vb += (b[i] - mb).powi(2);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn cmmpp_coupling_induces_positive_correlation() {
        let coupled = CmmppParams {
            regular_activity: 0.1,
            alarm_activity: 0.9,
            p_regular_to_alarm: 0.0,
            p_alarm_to_regular: 0.0,
            coupling: 0.05,
        };
        let uncoupled = CmmppParams {
            coupling: 0.0,
            ..coupled
        };
        let t_coupled = gen_cmmpp(&coupled, 20, 10_000, &mut RngStream::new(4)).unwrap();
        let t_control = gen_cmmpp(&uncoupled, 20, 10_000, &mut RngStream::new(4)).unwrap();
        let r_coupled = pairwise_node_correlation(&t_coupled);
        let r_control = pairwise_node_correlation(&t_control);
        assert!(r_coupled > 0.05, "coupled correlation {r_coupled}");
        assert!(r_control.abs() < 0.05, "control correlation {r_control}");
    }

    #[test]
    fn ingest_collapses_same_slot_arrivals() {
        let log = ArrivalLog {
            records: vec![
                ArrivalRecord {
                    label: "a".into(),
                    time_s: 0.2,
                },
                ArrivalRecord {
                    label: "a".into(),
                    time_s: 0.7,
                },
            ],
        };
        let trace = ingest_trace(&log, 1.0, (0.0, 1.0)).unwrap();
        assert_eq!(trace.k_nodes(), 1);
        assert_eq!(trace.t_slots(), 1);
        assert_eq!(trace.active_count(0).unwrap(), 1);
    }

    #[test]
    fn ingest_boundary_goes_to_starting_slot() {
        let log = ArrivalLog {
            records: vec![ArrivalRecord {
                label: "n".into(),
                time_s: 2.0,
            }],
        };
        let trace = ingest_trace(&log, 1.0, (0.0, 4.0)).unwrap();
        assert!(trace.is_active(NodeId(0), 2));
        assert_eq!(trace.active_counts().iter().sum::<usize>(), 1);
    }

    #[test]
    fn ingest_periodic_nodes_counts() {
        // Periods 2s, 3s, 5s over [0, 30): multiples in window are 15, 10, 6.
        let mut records = Vec::new();
        for (label, period) in [("p2", 2.0), ("p3", 3.0), ("p5", 5.0)] {
            let mut t = 0.0;
            while t < 30.0 {
                records.push(ArrivalRecord {
                    label: label.into(),
                    time_s: t,
                });
                t += period;
            }
        }
        let log = ArrivalLog { records };
        let trace = ingest_trace(&log, 1.0, (0.0, 30.0)).unwrap();
        assert_eq!(trace.k_nodes(), 3);
        assert_eq!(trace.t_slots(), 30);
        let per_node: Vec<usize> = (0..3)
            .map(|k| {
                (0..30)
                    .filter(|&t| trace.is_active(NodeId(k), t))
                    .count()
            })
            .collect();
        assert_eq!(per_node, vec![15, 10, 6]);
    }

    #[test]
    fn ingest_rejects_malformed_and_empty() {
        let bad = "node_label,timestamp_seconds\nx,notanumber\n";
        let err = ArrivalLog::from_csv(bad).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let log = ArrivalLog {
            records: vec![ArrivalRecord {
                label: "a".into(),
                time_s: 100.0,
            }],
        };
        assert!(matches!(
            ingest_trace(&log, 1.0, (0.0, 10.0)),
            Err(Error::EmptyWindow)
        ));
    }

    #[test]
    fn arrival_log_csv_round_trip() {
        let log = ArrivalLog {
            records: vec![
                ArrivalRecord {
                    label: "meter-1".into(),
                    time_s: 0.5,
                },
                ArrivalRecord {
                    label: "meter-2".into(),
                    time_s: 3.25,
                },
            ],
        };
        let parsed = ArrivalLog::from_csv(&log.to_csv()).unwrap();
        assert_eq!(parsed.records, log.records);
    }

    #[test]
    fn active_count_examples() {
        let trace = ActivityTrace::from_rows(vec![
            vec![1, 0],
            vec![0, 0],
            vec![1, 0],
            vec![1, 0],
            vec![0, 0],
        ])
        .unwrap();
        assert_eq!(trace.active_count(0).unwrap(), 3);
        assert_eq!(trace.active_count(1).unwrap(), 0);
        assert!(trace.active_count(2).is_err());
    }
}
