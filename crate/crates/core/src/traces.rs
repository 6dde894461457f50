//! Packet traces: parsing, sanitization, fixed-length encodings and datasets.
//!
//! A trace is a sequence of `(time, direction)` packet events for one page
//! load. Packet sizes are not modelled; only the sign of each packet is kept.
//!
//! On disk a trace is a UTF-8 text file with one packet per line:
//!
//! ```text
//! # comment
//! 0.0 +1
//! 0.12 -1 0
//! ```
//!
//! The optional third column flags defense-injected dummies (`0`/`1`).
//! Datasets live in `<root>/<class_label>/<trace_id>.txt`, or are listed by a
//! JSON manifest.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default encoded length, in packets.
pub const DEFAULT_TRACE_LENGTH: usize = 5000;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("trace contains no packet records")]
    EmptyFile,
    #[error("representation length must be at least 1")]
    ZeroLength,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<TraceError>,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
}

impl TraceError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TraceError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Outgoing,
    Incoming,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Outgoing => 1.0,
            Direction::Incoming => -1.0,
        }
    }

    pub fn from_sign(value: f64) -> Self {
        // -0.0 counts as outgoing too.
        if value >= 0.0 {
            Direction::Outgoing
        } else {
            Direction::Incoming
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub direction: Direction,
    pub is_dummy: bool,
}

impl TraceEvent {
    pub fn real(time: f64, direction: Direction) -> Self {
        TraceEvent {
            time,
            direction,
            is_dummy: false,
        }
    }

    pub fn dummy(time: f64, direction: Direction) -> Self {
        TraceEvent {
            time,
            direction,
            is_dummy: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub label: usize,
}

impl Trace {
    pub fn new(events: Vec<TraceEvent>, label: usize) -> Self {
        Trace { events, label }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.time - a.time,
            _ => 0.0,
        }
    }

    pub fn real_events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| !e.is_dummy)
    }

    pub fn dummy_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_dummy).count()
    }

    /// Renders the trace in the on-disk text format (with the dummy column).
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.events.len() * 12);
        for e in &self.events {
            let dir = match e.direction {
                Direction::Outgoing => "+1",
                Direction::Incoming => "-1",
            };
            out.push_str(&format!("{} {} {}\n", e.time, dir, u8::from(e.is_dummy)));
        }
        out
    }
}

fn parse_direction(token: &str) -> Option<Direction> {
    match token {
        "+1" | "1" => Some(Direction::Outgoing),
        "-1" | "\u{2212}1" => Some(Direction::Incoming),
        _ => None,
    }
}

/// Parses one trace file. Events are kept in file order.
pub fn parse_trace(text: &str, label: usize) -> Result<Trace, TraceError> {
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let record = raw.trim();
        if record.is_empty() || record.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| TraceError::Malformed { line, reason };
        let fields: Vec<&str> = record.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(malformed(format!(
                "expected `<time> <dir> [is_dummy]`, got {} fields",
                fields.len()
            )));
        }
        let time: f64 = fields[0]
            .parse()
            .map_err(|_| malformed(format!("invalid timestamp `{}`", fields[0])))?;
        if !time.is_finite() || time < 0.0 {
            return Err(malformed(format!("timestamp `{}` must be finite and >= 0", fields[0])));
        }
        let direction = parse_direction(fields[1])
            .ok_or_else(|| malformed(format!("invalid direction `{}`", fields[1])))?;
        let is_dummy = match fields.get(2) {
            None | Some(&"0") => false,
            Some(&"1") => true,
            Some(other) => return Err(malformed(format!("invalid dummy flag `{other}`"))),
        };
        events.push(TraceEvent {
            time,
            direction,
            is_dummy,
        });
    }
    if events.is_empty() {
        return Err(TraceError::EmptyFile);
    }
    Ok(Trace { events, label })
}

pub fn read_trace_file(path: &Path, label: usize) -> Result<Trace, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| TraceError::io(path, e))?;
    parse_trace(&text, label).map_err(|e| TraceError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rejected {
    EmptyTrace,
    IncomingFirst,
}

impl fmt::Display for Rejected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejected::EmptyTrace => f.write_str("empty trace"),
            Rejected::IncomingFirst => f.write_str("trace starts with an incoming packet"),
        }
    }
}

/// Sorts events by time (stable on ties), re-bases them so the first event is
/// at 0 and rejects traces that are empty or open with an incoming packet.
pub fn sanitize(trace: Trace) -> Result<Trace, Rejected> {
    let Trace { mut events, label } = trace;
    if events.is_empty() {
        return Err(Rejected::EmptyTrace);
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    if events[0].direction == Direction::Incoming {
        return Err(Rejected::IncomingFirst);
    }
    let origin = events[0].time;
    if origin != 0.0 {
        for e in &mut events {
            e.time -= origin;
        }
    }
    Ok(Trace { events, label })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepKind {
    Directional,
    Timing,
}

impl RepKind {
    pub fn name(self) -> &'static str {
        match self {
            RepKind::Directional => "directional",
            RepKind::Timing => "timing",
        }
    }
}

/// Fixed-length numeric encoding of a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct RepVector {
    pub kind: RepKind,
    pub values: Vec<f64>,
}

impl RepVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Recovers events from a timing encoding. Decoding stops at the first
    /// zero after position 0 (the padding).
    pub fn timing_events(&self) -> Option<Vec<TraceEvent>> {
        if self.kind != RepKind::Timing {
            return None;
        }
        let mut events = Vec::new();
        for (i, &v) in self.values.iter().enumerate() {
            if i > 0 && v == 0.0 {
                break;
            }
            events.push(TraceEvent::real(v.abs(), Direction::from_sign(v)));
        }
        Some(events)
    }
}

/// Encodes the first `length` packets of a sanitized trace; shorter traces
/// are zero padded.
pub fn to_representation(trace: &Trace, kind: RepKind, length: usize) -> Result<RepVector, TraceError> {
    if length == 0 {
        return Err(TraceError::ZeroLength);
    }
    let mut values = vec![0.0; length];
    for (slot, e) in values.iter_mut().zip(&trace.events) {
        *slot = match kind {
            RepKind::Directional => e.direction.sign(),
            RepKind::Timing => {
                if e.time == 0.0 {
                    0.0
                } else {
                    e.direction.sign() * e.time
                }
            }
        };
    }
    Ok(RepVector { kind, values })
}

/// A labelled collection of traces for a closed-world problem.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub traces: Vec<Trace>,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeSummary {
    pub accepted: usize,
    pub rejected_empty: usize,
    pub rejected_incoming_first: usize,
}

impl Dataset {
    pub fn new(traces: Vec<Trace>, class_names: Vec<String>) -> Self {
        Dataset {
            traces,
            class_names,
        }
    }

    pub fn with_numbered_classes(traces: Vec<Trace>, num_classes: usize) -> Self {
        let class_names = (0..num_classes).map(|c| c.to_string()).collect();
        Dataset {
            traces,
            class_names,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.traces.iter().map(|t| t.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for t in &self.traces {
            if let Some(c) = counts.get_mut(t.label) {
                *c += 1;
            }
        }
        counts
    }

    /// Checks label range and the minimum of two samples per class.
    pub fn validate(&self) -> Result<(), TraceError> {
        let c = self.num_classes();
        if c < 2 {
            return Err(TraceError::InvalidDataset(format!("need at least 2 classes, found {c}")));
        }
        if let Some(t) = self.traces.iter().find(|t| t.label >= c) {
            return Err(TraceError::InvalidDataset(format!(
                "label {} out of range for {c} classes",
                t.label
            )));
        }
        for (class, &n) in self.class_counts().iter().enumerate() {
            if n < 2 {
                return Err(TraceError::InvalidDataset(format!(
                    "class `{}` has {n} traces, need at least 2",
                    self.class_names[class]
                )));
            }
        }
        Ok(())
    }

    /// Sanitizes every trace, dropping rejected ones.
    pub fn sanitized(self) -> (Dataset, SanitizeSummary) {
        let mut summary = SanitizeSummary::default();
        let mut traces = Vec::with_capacity(self.traces.len());
        for t in self.traces {
            match sanitize(t) {
                Ok(t) => traces.push(t),
                Err(Rejected::EmptyTrace) => summary.rejected_empty += 1,
                Err(Rejected::IncomingFirst) => summary.rejected_incoming_first += 1,
            }
        }
        summary.accepted = traces.len();
        (
            Dataset {
                traces,
                class_names: self.class_names,
            },
            summary,
        )
    }

    pub fn encode(&self, kind: RepKind, length: usize) -> Result<Vec<RepVector>, TraceError> {
        self.traces
            .iter()
            .map(|t| to_representation(t, kind, length))
            .collect()
    }

    /// Writes `<root>/<class_name>/<index>.txt` files.
    pub fn write_dir(&self, root: &Path) -> Result<(), TraceError> {
        let mut per_class = vec![0usize; self.num_classes()];
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| TraceError::io(&dir, e))?;
        }
        for t in &self.traces {
            let name = self.class_names.get(t.label).ok_or_else(|| {
                TraceError::InvalidDataset(format!("label {} has no class name", t.label))
            })?;
            let idx = per_class[t.label];
            per_class[t.label] += 1;
            let path = root.join(name).join(format!("{idx:05}.txt"));
            fs::write(&path, t.to_text()).map_err(|e| TraceError::io(&path, e))?;
        }
        Ok(())
    }
}

fn sorted_class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>, TraceError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| TraceError::io(root, e))? {
        let entry = entry.map_err(|e| TraceError::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    let all_numeric = dirs.iter().all(|(n, _)| n.parse::<u64>().is_ok());
    if all_numeric {
        dirs.sort_by_key(|(n, _)| n.parse::<u64>().unwrap_or(u64::MAX));
    } else {
        dirs.sort();
    }
    Ok(dirs)
}

/// Loads `<root>/<class_label>/<trace_id>.txt`. Class indices follow the
/// numeric order of the directory names when all are integers, else
/// lexicographic order. Files within a class are read in name order.
pub fn load_dir(root: &Path) -> Result<Dataset, TraceError> {
    let classes = sorted_class_dirs(root)?;
    let mut traces = Vec::new();
    let mut class_names = Vec::with_capacity(classes.len());
    for (label, (name, dir)) in classes.into_iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| TraceError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        for f in files {
            traces.push(read_trace_file(&f, label)?);
        }
        class_names.push(name);
    }
    Ok(Dataset {
        traces,
        class_names,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub traces: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// Loads a JSON manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Dataset, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| TraceError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| TraceError::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut traces = Vec::with_capacity(manifest.traces.len());
    for entry in &manifest.traces {
        if entry.label >= manifest.classes.len() {
            return Err(TraceError::Manifest {
                path: path.to_path_buf(),
                reason: format!("label {} out of range", entry.label),
            });
        }
        let p = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        };
        traces.push(read_trace_file(&p, entry.label)?);
    }
    Ok(Dataset {
        traces,
        class_names: manifest.classes,
    })
}

/// Stable ordering of events by time.
pub(crate) fn by_time(a: &TraceEvent, b: &TraceEvent) -> Ordering {
    a.time.total_cmp(&b.time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Direction::{Incoming as In, Outgoing as Out};

    fn trace(spec: &[(f64, Direction)]) -> Trace {
        Trace::new(spec.iter().map(|&(t, d)| TraceEvent::real(t, d)).collect(), 0)
    }

    #[test]
    fn parses_simple_records() {
        let t = parse_trace("0.0 +1\n0.12 -1", 3).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.label, 3);
        assert_eq!(t.events[0], TraceEvent::real(0.0, Out));
        assert_eq!(t.events[1], TraceEvent::real(0.12, In));
    }

    #[test]
    fn keeps_ties_in_file_order() {
        let t = parse_trace("0.0 +1\n0.05 +1\n0.05 −1", 0).unwrap();
        let dirs: Vec<_> = t.events.iter().map(|e| e.direction).collect();
        assert_eq!(dirs, vec![Out, Out, In]);
        assert_eq!(t.events[1].time, t.events[2].time);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_trace("abc +1", 0) {
            Err(TraceError::Malformed { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_trace("# header\n0 1\n0.1 2\n", 0) {
            Err(TraceError::Malformed { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_trace("", 0), Err(TraceError::EmptyFile)));
        assert!(matches!(parse_trace("# only comments\n\n", 0), Err(TraceError::EmptyFile)));
        assert!(parse_trace("0 +1 7", 0).is_err());
        assert!(parse_trace("-1 +1", 0).is_err());
    }

    #[test]
    fn reads_dummy_column() {
        let t = parse_trace("0 1 0\n0.5 -1 1\n", 0).unwrap();
        assert!(!t.events[0].is_dummy);
        assert!(t.events[1].is_dummy);
        assert_eq!(parse_trace(&t.to_text(), 0).unwrap(), t);
    }

    #[test]
    fn sanitize_sorts_and_rebases() {
        let t = sanitize(trace(&[(0.2, In), (0.0, Out)])).unwrap();
        assert_eq!(t.events, vec![TraceEvent::real(0.0, Out), TraceEvent::real(0.2, In)]);

        let t = sanitize(trace(&[(5.0, Out), (5.5, In)])).unwrap();
        assert_eq!(t.events[0].time, 0.0);
        assert_eq!(t.events[1].time, 0.5);
    }

    #[test]
    fn sanitize_rejections() {
        assert_eq!(sanitize(trace(&[(0.1, Out), (0.0, In)])), Err(Rejected::IncomingFirst));
        assert_eq!(sanitize(trace(&[])), Err(Rejected::EmptyTrace));
    }

    #[test]
    fn directional_and_timing_encodings() {
        let t = trace(&[(0.0, Out), (0.1, In), (0.3, Out)]);
        let d = to_representation(&t, RepKind::Directional, 5).unwrap();
        assert_eq!(d.values, vec![1.0, -1.0, 1.0, 0.0, 0.0]);
        let tm = to_representation(&t, RepKind::Timing, 5).unwrap();
        assert_eq!(tm.values, vec![0.0, -0.1, 0.3, 0.0, 0.0]);
        assert!(tm.values[0].is_sign_positive());
        assert!(matches!(to_representation(&t, RepKind::Timing, 0), Err(TraceError::ZeroLength)));
    }

    #[test]
    fn encoding_truncates() {
        let events: Vec<_> = (0..7)
            .map(|i| TraceEvent::real(i as f64, if i % 3 == 0 { Out } else { In }))
            .collect();
        let t = Trace::new(events, 0);
        let d = to_representation(&t, RepKind::Directional, 5).unwrap();
        assert_eq!(d.values, vec![1.0, -1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn dataset_roundtrips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::with_numbered_classes(
            vec![
                Trace::new(vec![TraceEvent::real(0.0, Out), TraceEvent::dummy(0.25, In)], 0),
                Trace::new(vec![TraceEvent::real(0.0, Out)], 1),
                Trace::new(vec![TraceEvent::real(0.0, Out), TraceEvent::real(1.5, In)], 1),
            ],
            2,
        );
        ds.write_dir(dir.path()).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back.class_names, vec!["0", "1"]);
        assert_eq!(back.traces, ds.traces);

        let manifest = Manifest {
            classes: vec!["a".into(), "b".into()],
            traces: vec![
                ManifestEntry { path: "0/00000.txt".into(), label: 1 },
                ManifestEntry { path: "1/00000.txt".into(), label: 0 },
            ],
        };
        let mpath = dir.path().join("manifest.json");
        fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        let m = load_manifest(&mpath).unwrap();
        assert_eq!(m.class_names, vec!["a", "b"]);
        assert_eq!(m.traces[0].label, 1);
        assert_eq!(m.traces[0].events, ds.traces[0].events);
    }

    #[test]
    fn numeric_class_dirs_sort_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["10", "2", "1"] {
            let d = dir.path().join(name);
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join("a.txt"), "0 +1\n1 -1\n").unwrap();
        }
        let ds = load_dir(dir.path()).unwrap();
        assert_eq!(ds.class_names, vec!["1", "2", "10"]);
    }

    #[test]
    fn validate_catches_thin_classes() {
        let t = |l| Trace::new(vec![TraceEvent::real(0.0, Out)], l);
        let ds = Dataset::with_numbered_classes(vec![t(0), t(0), t(1)], 2);
        assert!(ds.validate().is_err());
        let ds = Dataset::with_numbered_classes(vec![t(0), t(0), t(1), t(1)], 2);
        assert!(ds.validate().is_ok());
    }

    fn arb_trace() -> impl Strategy<Value = Trace> {
        prop::collection::vec((0.0f64..100.0, any::<bool>(), any::<bool>()), 1..40).prop_map(|v| {
            Trace::new(
                v.into_iter()
                    .map(|(t, out, dummy)| TraceEvent {
                        time: t,
                        direction: if out { Out } else { In },
                        is_dummy: dummy,
                    })
                    .collect(),
                0,
            )
        })
    }

    proptest! {
        #[test]
        fn sanitize_is_idempotent(t in arb_trace()) {
            if let Ok(s) = sanitize(t) {
                prop_assert_eq!(sanitize(s.clone()).unwrap(), s.clone());
                let d = to_representation(&s, RepKind::Directional, 64).unwrap();
                prop_assert_eq!(d.values[0], 1.0);
                prop_assert!(s.events.windows(2).all(|w| w[0].time <= w[1].time));
            }
        }

        #[test]
        fn timing_roundtrip(gaps in prop::collection::vec((0.001f64..3.0, any::<bool>()), 0..30), len in 30usize..40) {
            let mut events = vec![TraceEvent::real(0.0, Out)];
            let mut now = 0.0;
            for (g, out) in gaps {
                now += g;
                events.push(TraceEvent::real(now, if out { Out } else { In }));
            }
            let t = Trace::new(events, 0);
            let rep = to_representation(&t, RepKind::Timing, len).unwrap();
            prop_assert_eq!(rep.timing_events().unwrap(), t.events);
        }
    }
}
