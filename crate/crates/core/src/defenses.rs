//! Defense simulators: trace-to-trace transformations that add dummy packets,
//! delay real ones, or overlay several page loads.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, WfRng};
use crate::traces::{by_time, Dataset, Direction, Trace, TraceEvent};

#[derive(Debug, Error, PartialEq)]
pub enum DefenseError {
    #[error("invalid defense parameter: {0}")]
    InvalidParameter(String),
    #[error("merge with M={m} needs at least M distinct classes, dataset has {classes}")]
    NotEnoughClasses { m: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DefenseVariant {
    /// Simplified Tamaraw: fixed-interval slots per direction plus tail
    /// padding to a multiple of `pad_multiple` packets.
    ConstantRate {
        rho_out: f64,
        rho_in: f64,
        pad_multiple: usize,
    },
    /// FRONT: Rayleigh-scheduled dummies front-loaded on both sides.
    Front {
        n_client: usize,
        n_server: usize,
        w_min: f64,
        w_max: f64,
    },
    /// Overlay of `m` simultaneous page loads.
    Merge { m: usize },
    /// Traces were defended by a third-party simulator before ingestion.
    External { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    #[serde(flatten)]
    pub variant: DefenseVariant,
    #[serde(default)]
    pub seed: u64,
}

impl DefenseSpec {
    pub fn tamaraw(seed: u64) -> Self {
        DefenseSpec {
            variant: DefenseVariant::ConstantRate {
                rho_out: 0.04,
                rho_in: 0.012,
                pad_multiple: 50,
            },
            seed,
        }
    }

    pub fn front_t1(seed: u64) -> Self {
        DefenseSpec {
            variant: DefenseVariant::Front {
                n_client: 1700,
                n_server: 1700,
                w_min: 1.0,
                w_max: 14.0,
            },
            seed,
        }
    }

    pub fn front_t2(seed: u64) -> Self {
        DefenseSpec {
            variant: DefenseVariant::Front {
                n_client: 2500,
                n_server: 2500,
                w_min: 1.0,
                w_max: 14.0,
            },
            seed,
        }
    }

    pub fn merge(m: usize, seed: u64) -> Self {
        DefenseSpec {
            variant: DefenseVariant::Merge { m },
            seed,
        }
    }

    pub fn name(&self) -> String {
        match &self.variant {
            DefenseVariant::ConstantRate { .. } => "constant_rate".into(),
            DefenseVariant::Front { .. } => "front".into(),
            DefenseVariant::Merge { m } => format!("merge_{m}"),
            DefenseVariant::External { name } => format!("external_{name}"),
        }
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        let bad = |s: &str| Err(DefenseError::InvalidParameter(s.to_string()));
        match self.variant {
            DefenseVariant::ConstantRate {
                rho_out,
                rho_in,
                pad_multiple,
            } => {
                if !(rho_out > 0.0 && rho_out.is_finite() && rho_in > 0.0 && rho_in.is_finite()) {
                    return bad("rho_out and rho_in must be positive");
                }
                if pad_multiple < 1 {
                    return bad("pad_multiple must be >= 1");
                }
            }
            DefenseVariant::Front {
                n_client,
                n_server,
                w_min,
                w_max,
            } => {
                if n_client < 1 || n_server < 1 {
                    return bad("n_client and n_server must be >= 1");
                }
                if !(w_min > 0.0 && w_min <= w_max && w_max.is_finite()) {
                    return bad("FRONT window requires 0 < w_min <= w_max");
                }
            }
            DefenseVariant::Merge { m } => {
                if m < 1 {
                    return bad("merge requires M >= 1");
                }
            }
            DefenseVariant::External { .. } => {}
        }
        Ok(())
    }
}

/// Index of the first slot `k` with `k * period >= time`.
fn first_slot_at_or_after(time: f64, period: f64) -> u64 {
    let mut k = (time / period).ceil().max(0.0) as u64;
    while k > 0 && (k - 1) as f64 * period >= time {
        k -= 1;
    }
    while (k as f64) * period < time {
        k += 1;
    }
    k
}

fn constant_rate_stream(
    times: impl Iterator<Item = f64>,
    direction: Direction,
    period: f64,
    pad_multiple: usize,
    out: &mut Vec<TraceEvent>,
) {
    let mut next_free = 0u64;
    for t in times {
        let slot = first_slot_at_or_after(t, period).max(next_free);
        for k in next_free..slot {
            out.push(TraceEvent::dummy(k as f64 * period, direction));
        }
        out.push(TraceEvent::real(slot as f64 * period, direction));
        next_free = slot + 1;
    }
    let pad = pad_multiple as u64;
    let target = if next_free == 0 {
        pad
    } else {
        next_free.div_ceil(pad) * pad
    };
    for k in next_free..target {
        out.push(TraceEvent::dummy(k as f64 * period, direction));
    }
}

/// Constant-rate padding. Real packets keep their per-direction order and
/// are only ever delayed.
pub fn apply_constant_rate(trace: &Trace, rho_out: f64, rho_in: f64, pad_multiple: usize) -> Trace {
    let times = |d: Direction| {
        trace
            .events
            .iter()
            .filter(move |e| !e.is_dummy && e.direction == d)
            .map(|e| e.time)
    };
    let mut events = Vec::new();
    constant_rate_stream(times(Direction::Outgoing), Direction::Outgoing, rho_out, pad_multiple, &mut events);
    constant_rate_stream(times(Direction::Incoming), Direction::Incoming, rho_in, pad_multiple, &mut events);
    events.sort_by(by_time);
    Trace::new(events, trace.label)
}

fn rayleigh(rng: &mut WfRng, scale: f64) -> f64 {
    let u: f64 = rng.random();
    scale * (-2.0 * (1.0 - u).ln()).sqrt()
}

/// FRONT padding: uniform dummy budgets and windows per side, Rayleigh
/// schedule, dummies after the last real packet dropped.
pub fn apply_front(
    trace: &Trace,
    n_client: usize,
    n_server: usize,
    w_min: f64,
    w_max: f64,
    rng: &mut WfRng,
) -> Trace {
    let end = trace
        .real_events()
        .map(|e| e.time)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut events = trace.events.clone();
    for (budget, direction) in [(n_client, Direction::Outgoing), (n_server, Direction::Incoming)] {
        let count = rng.random_range(1..=budget);
        let window = rng.random_range(w_min..=w_max);
        for _ in 0..count {
            let t = rayleigh(rng, window);
            if t <= end {
                events.push(TraceEvent::dummy(t, direction));
            }
        }
    }
    events.sort_by(by_time);
    Trace::new(events, trace.label)
}

/// Overlays `parts` into one trace; events of `parts[target]` stay real and
/// every other event becomes a dummy. Ties keep the order of `parts`.
fn overlay(parts: &[&Trace], target: usize) -> Trace {
    let total = parts.iter().map(|t| t.len()).sum();
    let mut events = Vec::with_capacity(total);
    for (i, t) in parts.iter().enumerate() {
        if i == target {
            events.extend_from_slice(&t.events);
        } else {
            events.extend(t.events.iter().map(|e| TraceEvent::dummy(e.time, e.direction)));
        }
    }
    events.sort_by(by_time);
    Trace::new(events, parts[target].label)
}

/// Merges a target page load with `decoys` (M-1 other loads). The result
/// carries the target's label; decoy packets are flagged as dummies.
pub fn merge_traces(target: &Trace, decoys: &[&Trace]) -> Trace {
    let mut parts = Vec::with_capacity(decoys.len() + 1);
    parts.push(target);
    parts.extend_from_slice(decoys);
    overlay(&parts, 0)
}

/// Minimal classification error of the M-merged problem when undefended
/// traces are perfectly separable: the adversary can at best guess which of
/// the M identified pages is the target.
pub fn merged_theoretical_error(m: usize) -> Result<f64, DefenseError> {
    if m < 1 {
        return Err(DefenseError::InvalidParameter("M must be >= 1".into()));
    }
    Ok(1.0 - 1.0 / m as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadStats {
    pub traces: usize,
    pub real_packets: usize,
    pub dummy_packets: usize,
    /// dummy / real packet count.
    pub bandwidth_overhead: f64,
    /// Sum of per-packet delays of real packets, seconds.
    pub total_delay: f64,
    pub mean_delay_per_trace: f64,
}

/// Dummy count and summed real-packet delay of one defended trace relative
/// to its original. Real packets are matched per direction in order.
pub fn trace_overhead(original: &Trace, defended: &Trace) -> (usize, usize, f64) {
    let mut delay = 0.0;
    for d in [Direction::Outgoing, Direction::Incoming] {
        let before = original.real_events().filter(|e| e.direction == d);
        let after = defended.real_events().filter(|e| e.direction == d);
        for (a, b) in before.zip(after) {
            delay += (b.time - a.time).max(0.0);
        }
    }
    let real = defended.real_events().count();
    (real, defended.dummy_count(), delay)
}

fn trace_rng(seed: u64, label: usize, index: usize) -> WfRng {
    rng::rng_from(seed, &[rng::purpose::DEFENSE, label as u64, index as u64])
}

fn pick_merge_parts<'a>(
    dataset: &'a Dataset,
    by_class: &[Vec<usize>],
    index: usize,
    m: usize,
    rng: &mut WfRng,
) -> (Vec<&'a Trace>, usize) {
    let target = &dataset.traces[index];
    let mut classes: Vec<usize> = (0..dataset.num_classes())
        .filter(|&c| c != target.label && !by_class[c].is_empty())
        .collect();
    let mut parts = Vec::with_capacity(m);
    for _ in 1..m {
        let pick = rng.random_range(0..classes.len());
        let class = classes.swap_remove(pick);
        let members = &by_class[class];
        parts.push(&dataset.traces[members[rng.random_range(0..members.len())]]);
    }
    let pos = rng.random_range(0..m);
    parts.insert(pos, target);
    (parts, pos)
}

/// Applies a defense to every trace of a dataset. Per-trace randomness comes
/// from `hash(seed, class, trace_index)`, so the output does not depend on
/// the thread count.
pub fn apply_defense(dataset: &Dataset, spec: &DefenseSpec) -> Result<(Dataset, OverheadStats), DefenseError> {
    spec.validate()?;
    let seed = spec.seed;
    let defended: Vec<Trace> = match &spec.variant {
        DefenseVariant::ConstantRate {
            rho_out,
            rho_in,
            pad_multiple,
        } => dataset
            .traces
            .par_iter()
            .map(|t| apply_constant_rate(t, *rho_out, *rho_in, *pad_multiple))
            .collect(),
        DefenseVariant::Front {
            n_client,
            n_server,
            w_min,
            w_max,
        } => dataset
            .traces
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut rng = trace_rng(seed, t.label, i);
                apply_front(t, *n_client, *n_server, *w_min, *w_max, &mut rng)
            })
            .collect(),
        DefenseVariant::Merge { m } => {
            let m = *m;
            let classes = dataset.num_classes();
            if m > classes {
                return Err(DefenseError::NotEnoughClasses { m, classes });
            }
            let mut by_class = vec![Vec::new(); classes];
            for (i, t) in dataset.traces.iter().enumerate() {
                by_class[t.label].push(i);
            }
            dataset
                .traces
                .par_iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut rng = trace_rng(seed, t.label, i);
                    let (parts, pos) = pick_merge_parts(dataset, &by_class, i, m, &mut rng);
                    overlay(&parts, pos)
                })
                .collect()
        }
        DefenseVariant::External { .. } => dataset.traces.clone(),
    };

    let mut stats = OverheadStats {
        traces: defended.len(),
        ..Default::default()
    };
    for (orig, def) in dataset.traces.iter().zip(&defended) {
        let (real, dummy, delay) = match spec.variant {
            // Pre-defended input: only the dummy flags are informative.
            DefenseVariant::External { .. } => (def.real_events().count(), def.dummy_count(), 0.0),
            _ => trace_overhead(orig, def),
        };
        stats.real_packets += real;
        stats.dummy_packets += dummy;
        stats.total_delay += delay;
    }
    if stats.real_packets > 0 {
        stats.bandwidth_overhead = stats.dummy_packets as f64 / stats.real_packets as f64;
    }
    if stats.traces > 0 {
        stats.mean_delay_per_trace = stats.total_delay / stats.traces as f64;
    }
    Ok((
        Dataset::new(defended, dataset.class_names.clone()),
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::sanitize;
    use proptest::prelude::*;
    use Direction::{Incoming as In, Outgoing as Out};

    fn trace(spec: &[(f64, Direction)], label: usize) -> Trace {
        Trace::new(spec.iter().map(|&(t, d)| TraceEvent::real(t, d)).collect(), label)
    }

    fn stream(t: &Trace, d: Direction) -> Vec<(f64, bool)> {
        t.events
            .iter()
            .filter(|e| e.direction == d)
            .map(|e| (e.time, e.is_dummy))
            .collect()
    }

    #[test]
    fn constant_rate_slot_assignment() {
        let t = trace(&[(0.0, Out), (0.1, Out)], 0);
        let d = apply_constant_rate(&t, 0.04, 0.012, 1);
        let out = stream(&d, Out);
        assert_eq!(out.len(), 4);
        let expected = [(0.0, false), (0.04, true), (0.08, true), (0.12, false)];
        for ((t, dummy), (et, ed)) in out.iter().zip(expected) {
            assert!((t - et).abs() < 1e-12);
            assert_eq!(*dummy, ed);
        }
        // Empty incoming stream still emits pad_multiple dummies.
        let inc = stream(&d, In);
        assert_eq!(inc, vec![(0.0, true)]);
    }

    #[test]
    fn constant_rate_pads_to_multiple() {
        let t = trace(&[(0.0, Out), (0.01, In), (0.3, Out), (0.31, In), (0.9, In)], 0);
        let d = apply_constant_rate(&t, 0.04, 0.012, 50);
        assert_eq!(stream(&d, Out).len() % 50, 0);
        assert_eq!(stream(&d, In).len() % 50, 0);
        assert_eq!(stream(&d, In).iter().filter(|x| !x.1).count(), 3);
        let only_out = trace(&[(0.0, Out)], 0);
        assert_eq!(stream(&apply_constant_rate(&only_out, 0.04, 0.012, 50), In).len(), 50);
    }

    #[test]
    fn slot_boundaries_are_exact() {
        assert_eq!(first_slot_at_or_after(0.12, 0.04), 3);
        assert_eq!(first_slot_at_or_after(0.08, 0.04), 2);
        assert_eq!(first_slot_at_or_after(0.0, 0.04), 0);
        assert_eq!(first_slot_at_or_after(0.0401, 0.04), 2);
    }

    #[test]
    fn front_preserves_real_packets_and_bounds_dummies() {
        let t = trace(&[(0.0, Out), (0.5, In), (1.0, In), (3.0, Out), (9.0, In)], 2);
        let mut rng = rng::rng_from(11, &[]);
        let d = apply_front(&t, 100, 80, 1.0, 14.0, &mut rng);
        let real: Vec<_> = d.real_events().copied().collect();
        assert_eq!(real, t.events);
        let out_dummies = d.events.iter().filter(|e| e.is_dummy && e.direction == Out).count();
        let in_dummies = d.events.iter().filter(|e| e.is_dummy && e.direction == In).count();
        assert!(out_dummies <= 100 && in_dummies <= 80);
        assert!(d.events.iter().all(|e| e.time <= 9.0));
        assert!(d.events.windows(2).all(|w| w[0].time <= w[1].time));
        assert_eq!(sanitize(d.clone()).unwrap(), d);

        let again = apply_front(&t, 100, 80, 1.0, 14.0, &mut rng::rng_from(11, &[]));
        assert_eq!(again, d);
    }

    #[test]
    fn merge_examples() {
        let a = trace(&[(0.0, Out), (0.2, In), (0.4, Out)], 0);
        let b = trace(&[(0.0, Out), (0.1, In), (0.3, In), (0.5, Out)], 1);
        assert_eq!(merge_traces(&a, &[]), a);
        let m = merge_traces(&a, &[&b]);
        assert_eq!(m.len(), 7);
        assert_eq!(m.label, 0);
        assert!(m.events.windows(2).all(|w| w[0].time <= w[1].time));
        assert_eq!(m.real_events().count(), 3);

        let twice = merge_traces(&a, &[&a]);
        for e in &a.events {
            assert_eq!(twice.events.iter().filter(|x| x.time == e.time).count(), 2);
        }
    }

    #[test]
    fn merged_error_values() {
        assert_eq!(merged_theoretical_error(1).unwrap(), 0.0);
        assert_eq!(merged_theoretical_error(2).unwrap(), 0.5);
        assert!((merged_theoretical_error(10).unwrap() - 0.9).abs() < 1e-15);
        assert!(merged_theoretical_error(0).is_err());
    }

    #[test]
    fn dataset_merge_uses_distinct_other_classes() {
        let traces: Vec<_> = (0..12)
            .map(|i| trace(&[(0.0, Out), (1.0 + i as f64, In)], i % 4))
            .collect();
        let ds = Dataset::with_numbered_classes(traces, 4);
        let (out, stats) = apply_defense(&ds, &DefenseSpec::merge(3, 5)).unwrap();
        for (o, d) in ds.traces.iter().zip(&out.traces) {
            assert_eq!(d.len(), 6);
            assert_eq!(d.label, o.label);
            let real: Vec<_> = d.real_events().copied().collect();
            assert_eq!(real, o.events);
            // Decoy packets carry the incoming time of their page: 1 + index,
            // index % 4 is the class.
            let mut classes: Vec<usize> = d
                .events
                .iter()
                .filter(|e| e.direction == In)
                .map(|e| (e.time as usize - 1) % 4)
                .collect();
            classes.sort();
            classes.dedup();
            assert_eq!(classes.len(), 3);
        }
        assert_eq!(stats.dummy_packets, 48);
        assert!((stats.bandwidth_overhead - 2.0).abs() < 1e-12);
        assert_eq!(
            apply_defense(&ds, &DefenseSpec::merge(5, 5)).unwrap_err(),
            DefenseError::NotEnoughClasses { m: 5, classes: 4 }
        );
    }

    #[test]
    fn spec_validation_and_config_syntax() {
        assert!(DefenseSpec::tamaraw(0).validate().is_ok());
        assert!(DefenseSpec::front_t1(0).validate().is_ok());
        let bad = DefenseSpec {
            variant: DefenseVariant::Front { n_client: 1, n_server: 1, w_min: 2.0, w_max: 1.0 },
            seed: 0,
        };
        assert!(bad.validate().is_err());

        #[derive(Deserialize)]
        struct Wrapper {
            defense: DefenseSpec,
        }
        let w: Wrapper = toml::from_str(
            "defense = { variant = \"constant_rate\", rho_out = 0.04, rho_in = 0.012, pad_multiple = 50, seed = 9 }",
        )
        .unwrap();
        assert_eq!(w.defense, DefenseSpec::tamaraw(9));
    }

    fn arb_trace() -> impl Strategy<Value = Trace> {
        prop::collection::vec((0.0f64..5.0, any::<bool>()), 1..30).prop_map(|v| {
            let mut events: Vec<_> = v
                .into_iter()
                .map(|(t, out)| TraceEvent::real(t, if out { Out } else { In }))
                .collect();
            events.insert(0, TraceEvent::real(0.0, Out));
            events.sort_by(by_time);
            Trace::new(events, 0)
        })
    }

    proptest! {
        #[test]
        fn constant_rate_invariants(t in arb_trace(), pad in 1usize..60) {
            let d = apply_constant_rate(&t, 0.04, 0.012, pad);
            for dir in [Out, In] {
                let s = stream(&d, dir);
                prop_assert_eq!(s.len() % pad, 0);
                prop_assert!(!s.is_empty());
                let before: Vec<f64> = t.events.iter().filter(|e| e.direction == dir).map(|e| e.time).collect();
                let after: Vec<f64> = s.iter().filter(|x| !x.1).map(|x| x.0).collect();
                prop_assert_eq!(before.len(), after.len());
                for (b, a) in before.iter().zip(&after) {
                    prop_assert!(a + 1e-12 >= *b);
                }
                let period = if dir == Out { 0.04 } else { 0.012 };
                for (i, (time, _)) in s.iter().enumerate() {
                    prop_assert!((time - i as f64 * period).abs() < 1e-9);
                }
            }
            prop_assert_eq!(d.events[0].direction, Out);
        }

        #[test]
        fn front_is_padding_only(t in arb_trace(), seed in any::<u64>()) {
            let d = apply_front(&t, 50, 50, 1.0, 14.0, &mut rng::rng_from(seed, &[]));
            let real: Vec<_> = d.real_events().copied().collect();
            prop_assert_eq!(real, t.events.clone());
        }
    }
}
