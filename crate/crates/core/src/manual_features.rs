//! Hand-crafted packet and burst statistics, the non-learned baseline
//! representation.

use std::io::Write;

use crate::traces::{Direction, Trace};

/// Number of entries in a [`ManualFeatureVector`].
pub const MANUAL_FEATURE_DIM: usize = 28;

const IPT_STATS: [&str; 6] = ["mean", "std", "p25", "p50", "p75", "p90"];

/// Feature names in vector order.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ["total_packets", "outgoing_packets", "incoming_packets", "outgoing_fraction", "duration"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for scope in ["all", "out", "in"] {
        for stat in IPT_STATS {
            names.push(format!("ipt_{scope}_{stat}"));
        }
    }
    names.extend(
        [
            "burst_count",
            "burst_mean_size_out",
            "burst_mean_size_in",
            "burst_max_size",
            "burst_mean_duration",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    names
}

pub type ManualFeatureVector = [f64; MANUAL_FEATURE_DIM];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Burst {
    pub direction: Direction,
    pub start: usize,
    pub len: usize,
    pub duration: f64,
}

/// Maximal runs of same-direction packets, in trace order.
pub fn burst_segments(trace: &Trace) -> Vec<Burst> {
    let mut bursts: Vec<Burst> = Vec::new();
    for (i, e) in trace.events.iter().enumerate() {
        match bursts.last_mut() {
            Some(b) if b.direction == e.direction => {
                b.len += 1;
                b.duration = e.time - trace.events[b.start].time;
            }
            _ => bursts.push(Burst {
                direction: e.direction,
                start: i,
                len: 1,
                duration: 0.0,
            }),
        }
    }
    bursts
}

/// Percentile by linear interpolation between order statistics (inclusive
/// method). `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn ipt_stats(mut gaps: Vec<f64>) -> [f64; 6] {
    if gaps.is_empty() {
        return [0.0; 6];
    }
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    [
        mean,
        var.sqrt(),
        percentile(&gaps, 25.0),
        percentile(&gaps, 50.0),
        percentile(&gaps, 75.0),
        percentile(&gaps, 90.0),
    ]
}

fn gaps(times: impl Iterator<Item = f64>) -> Vec<f64> {
    let times: Vec<f64> = times.collect();
    times.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn manual_features(trace: &Trace) -> ManualFeatureVector {
    let mut f = [0.0; MANUAL_FEATURE_DIM];
    let total = trace.len();
    let outgoing = trace
        .events
        .iter()
        .filter(|e| e.direction == Direction::Outgoing)
        .count();
    f[0] = total as f64;
    f[1] = outgoing as f64;
    f[2] = (total - outgoing) as f64;
    f[3] = if total > 0 {
        outgoing as f64 / total as f64
    } else {
        0.0
    };
    if total < 2 {
        return f;
    }
    f[4] = trace.duration();

    let all = gaps(trace.events.iter().map(|e| e.time));
    let per_dir = |d: Direction| gaps(trace.events.iter().filter(|e| e.direction == d).map(|e| e.time));
    f[5..11].copy_from_slice(&ipt_stats(all));
    f[11..17].copy_from_slice(&ipt_stats(per_dir(Direction::Outgoing)));
    f[17..23].copy_from_slice(&ipt_stats(per_dir(Direction::Incoming)));

    let bursts = burst_segments(trace);
    f[23] = bursts.len() as f64;
    let mean_size = |d: Direction| {
        let sizes: Vec<usize> = bursts.iter().filter(|b| b.direction == d).map(|b| b.len).collect();
        if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        }
    };
    f[24] = mean_size(Direction::Outgoing);
    f[25] = mean_size(Direction::Incoming);
    f[26] = bursts.iter().map(|b| b.len).max().unwrap_or(0) as f64;
    f[27] = bursts.iter().map(|b| b.duration).sum::<f64>() / bursts.len() as f64;
    f
}

/// Writes a header row of feature names, then one row per trace with the
/// label in the final column.
pub fn write_csv<W: Write>(mut out: W, traces: &[Trace]) -> std::io::Result<()> {
    let mut header = feature_names();
    header.push("label".into());
    writeln!(out, "{}", header.join(","))?;
    for t in traces {
        let row: Vec<String> = manual_features(t).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{}", row.join(","), t.label)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::TraceEvent;
    use proptest::prelude::*;
    use Direction::{Incoming as In, Outgoing as Out};

    fn trace(spec: &[(f64, Direction)]) -> Trace {
        Trace::new(spec.iter().map(|&(t, d)| TraceEvent::real(t, d)).collect(), 0)
    }

    #[test]
    fn names_match_dimension() {
        assert_eq!(feature_names().len(), MANUAL_FEATURE_DIM);
    }

    #[test]
    fn bursts_split_on_direction_change() {
        let b = burst_segments(&trace(&[(0.0, Out), (0.1, Out), (0.2, In), (0.4, Out)]));
        let shape: Vec<_> = b.iter().map(|b| (b.direction, b.start, b.len)).collect();
        assert_eq!(shape, vec![(Out, 0, 2), (In, 2, 1), (Out, 3, 1)]);
        assert!((b[0].duration - 0.1).abs() < 1e-12);

        let all_out = trace(&[(0.0, Out), (1.0, Out), (2.0, Out), (3.0, Out)]);
        assert_eq!(burst_segments(&all_out).len(), 1);
        assert_eq!(burst_segments(&all_out)[0].len, 4);

        let alternating: Vec<_> = (0..6).map(|i| (i as f64, if i % 2 == 0 { Out } else { In })).collect();
        let b = burst_segments(&trace(&alternating));
        assert_eq!(b.len(), 6);
        assert!(b.iter().all(|b| b.len == 1));
    }

    #[test]
    fn counts_and_duration() {
        let f = manual_features(&trace(&[(0.0, Out), (0.1, In), (0.3, Out)]));
        assert_eq!(f[0], 3.0);
        assert_eq!(f[1], 2.0);
        assert_eq!(f[2], 1.0);
        assert!((f[3] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f[4] - 0.3).abs() < 1e-15);
        assert_eq!(f[23], 3.0);
        // Overall gaps 0.1, 0.2: median 0.15.
        assert!((f[8] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn single_packet_is_all_zero_statistics() {
        let f = manual_features(&trace(&[(0.0, Out)]));
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 1.0);
        assert!(f[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn percentile_interpolates() {
        assert!((percentile(&[0.1, 0.2], 50.0) - 0.15).abs() < 1e-15);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 25.0), 2.0);
        assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 90.0) - 3.7).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 90.0), 7.0);
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[trace(&[(0.0, Out), (1.0, In)])]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), MANUAL_FEATURE_DIM + 1);
        assert!(lines[1].ends_with(",0"));
    }

    proptest! {
        #[test]
        fn features_are_finite_and_consistent(
            v in prop::collection::vec((0.0f64..10.0, any::<bool>()), 0..50)
        ) {
            let mut events: Vec<_> = v.into_iter().map(|(t, o)| TraceEvent::real(t, if o { Out } else { In })).collect();
            events.insert(0, TraceEvent::real(0.0, Out));
            events.sort_by(|a, b| a.time.total_cmp(&b.time));
            let t = Trace::new(events, 0);
            let f = manual_features(&t);
            prop_assert!(f.iter().all(|x| x.is_finite()));
            prop_assert_eq!(f[1] + f[2], f[0]);
            prop_assert!((0.0..=1.0).contains(&f[3]));
            let bursts = burst_segments(&t);
            prop_assert_eq!(bursts.iter().map(|b| b.len).sum::<usize>(), t.len());

            // Reversing runs of equal-time packets leaves counts and duration alone.
            let mut permuted = t.clone();
            permuted.events.reverse();
            permuted.events.sort_by(|a, b| a.time.total_cmp(&b.time));
            let g = manual_features(&permuted);
            prop_assert_eq!(&f[..5], &g[..5]);
        }
    }
}
