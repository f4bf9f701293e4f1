//! Flow records, their `1 × 20 × 2` encoding, a planted-signature synthetic
//! generator and stratified splitting.
//!
//! CSV schema: header `flow_id,label,sizes,dirs` (optional trailing
//! `transport`), packet lists separated by `;`, directions `U` or `D`.
//! JSONL mirror: `{"flow_id", "label", "sizes": [int], "dirs": ["U"|"D"]}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Packets kept per flow.
pub const MTS_LEN: usize = 20;
/// Variables per packet: size and direction.
pub const MTS_VARS: usize = 2;
/// Size normalizer (Ethernet MTU).
pub const SIZE_SCALE: u32 = 1500;
pub const MAX_PACKET_SIZE: u32 = 65_535;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "U")]
    Up,
    #[serde(rename = "D")]
    Down,
}

impl Direction {
    pub fn token(self) -> &'static str {
        match self {
            Direction::Up => "U",
            Direction::Down => "D",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "U" => Some(Direction::Up),
            "D" => Some(Direction::Down),
            _ => None,
        }
    }

    /// `+1` up, `-1` down.
    pub fn sign(self) -> f32 {
        match self {
            Direction::Up => 1.0,
            Direction::Down => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Packet {
    pub size: u32,
    pub dir: Direction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowRecord {
    pub flow_id: String,
    pub label: String,
    pub packets: Vec<Packet>,
    pub transport: Option<Transport>,
}

impl FlowRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.packets.is_empty() {
            return Err("flow has no packets".into());
        }
        if let Some(p) = self.packets.iter().find(|p| p.size > MAX_PACKET_SIZE) {
            return Err(format!("packet size {} exceeds {MAX_PACKET_SIZE}", p.size));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowFormat {
    Csv,
    Jsonl,
}

impl FlowFormat {
    /// `.jsonl` / `.json` are JSONL, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => FlowFormat::Jsonl,
            _ => FlowFormat::Csv,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FlowJson {
    flow_id: String,
    label: String,
    sizes: Vec<u32>,
    dirs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transport: Option<Transport>,
}

fn build_record(
    flow_id: &str,
    label: &str,
    sizes: Vec<u32>,
    dirs: &[&str],
    transport: Option<Transport>,
) -> std::result::Result<FlowRecord, String> {
    if sizes.len() != dirs.len() {
        return Err(format!("{} sizes but {} directions", sizes.len(), dirs.len()));
    }
    let packets = sizes
        .into_iter()
        .zip(dirs)
        .map(|(size, d)| Direction::parse(d).map(|dir| Packet { size, dir }).ok_or_else(|| format!("unknown direction `{d}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let rec = FlowRecord { flow_id: flow_id.to_string(), label: label.to_string(), packets, transport };
    rec.validate()?;
    Ok(rec)
}

fn parse_transport(s: &str) -> std::result::Result<Option<Transport>, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "tcp" => Ok(Some(Transport::Tcp)),
        "udp" => Ok(Some(Transport::Udp)),
        other => Err(format!("unknown transport `{other}`")),
    }
}

/// Reads flows from a file; malformed rows are reported with their line number.
pub fn parse_flows(path: &Path, format: FlowFormat) -> Result<Vec<FlowRecord>> {
    let file = File::open(path)?;
    parse_flows_from(BufReader::new(file), format, path)
}

/// [`parse_flows`] over any reader; `origin` labels error messages.
pub fn parse_flows_from<R: Read>(reader: R, format: FlowFormat, origin: &Path) -> Result<Vec<FlowRecord>> {
    let recs = match format {
        FlowFormat::Csv => parse_csv(reader, origin)?,
        FlowFormat::Jsonl => parse_jsonl(reader, origin)?,
    };
    if recs.is_empty() {
        log::warn!("{}: no flow records", origin.display());
    }
    Ok(recs)
}

fn parse_csv<R: Read>(reader: R, origin: &Path) -> Result<Vec<FlowRecord>> {
    let perr = |line: usize, msg: String| Error::Parse { path: origin.to_path_buf(), line, msg };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(perr(1, e.to_string())),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ci), Some(cl), Some(cs), Some(cd)) = (col("flow_id"), col("label"), col("sizes"), col("dirs")) else {
        return Err(perr(1, format!("header must contain flow_id,label,sizes,dirs; found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    };
    let ct = col("transport");
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| perr(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| row.get(i).ok_or_else(|| perr(line, format!("missing column {}", headers[i].trim())));
        let sizes = field(cs)?
            .split(';')
            .map(|s| s.trim().parse::<u32>().map_err(|_| perr(line, format!("non-numeric packet size `{}`", s.trim()))))
            .collect::<Result<Vec<_>>>()?;
        let dirs: Vec<&str> = field(cd)?.split(';').collect();
        let transport = match ct {
            Some(i) => parse_transport(row.get(i).unwrap_or("")).map_err(|m| perr(line, m))?,
            None => None,
        };
        out.push(build_record(field(ci)?, field(cl)?, sizes, &dirs, transport).map_err(|m| perr(line, m))?);
    }
    Ok(out)
}

fn parse_jsonl<R: Read>(reader: R, origin: &Path) -> Result<Vec<FlowRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
        let j: FlowJson = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        let dirs: Vec<&str> = j.dirs.iter().map(String::as_str).collect();
        out.push(build_record(&j.flow_id, &j.label, j.sizes, &dirs, j.transport).map_err(perr)?);
    }
    Ok(out)
}

fn join<T: ToString>(xs: impl Iterator<Item = T>) -> String {
    xs.map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_flows(path: &Path, records: &[FlowRecord], format: FlowFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        FlowFormat::Csv => {
            let mut cw = csv::Writer::from_writer(w);
            let with_transport = records.iter().any(|r| r.transport.is_some());
            let mut header = vec!["flow_id", "label", "sizes", "dirs"];
            if with_transport {
                header.push("transport");
            }
            cw.write_record(&header).map_err(csv_io)?;
            for r in records {
                let mut row = vec![
                    r.flow_id.clone(),
                    r.label.clone(),
                    join(r.packets.iter().map(|p| p.size)),
                    join(r.packets.iter().map(|p| p.dir.token())),
                ];
                if with_transport {
                    row.push(match r.transport {
                        Some(Transport::Tcp) => "tcp".into(),
                        Some(Transport::Udp) => "udp".into(),
                        None => String::new(),
                    });
                }
                cw.write_record(&row).map_err(csv_io)?;
            }
            cw.flush()?;
        }
        FlowFormat::Jsonl => {
            for r in records {
                let j = FlowJson {
                    flow_id: r.flow_id.clone(),
                    label: r.label.clone(),
                    sizes: r.packets.iter().map(|p| p.size).collect(),
                    dirs: r.packets.iter().map(|p| p.dir.token().to_string()).collect(),
                    transport: r.transport,
                };
                serde_json::to_writer(&mut w, &j)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// One encoded flow: `grid` is `[1, 20, 2]` with variable 0 the scaled size and
/// variable 1 the direction sign (`0` for padding).
#[derive(Clone, Debug, PartialEq)]
pub struct MtsSample {
    pub grid: Tensor<f32>,
    pub label: usize,
}

/// Encodes the first `len` packets of a flow into `len × 2` values.
pub fn encode_packets(packets: &[Packet], len: usize, size_scale: u32) -> Vec<f32> {
    let mut out = vec![0.0f32; len * MTS_VARS];
    for (t, p) in packets.iter().take(len).enumerate() {
        out[t * MTS_VARS] = p.size.min(size_scale) as f32 / size_scale as f32;
        out[t * MTS_VARS + 1] = p.dir.sign();
    }
    out
}

pub fn encode_flow(record: &FlowRecord, label: usize) -> MtsSample {
    let grid = Tensor::from_vec(&[1, MTS_LEN, MTS_VARS], encode_packets(&record.packets, MTS_LEN, SIZE_SCALE))
        .expect("grid shape");
    MtsSample { grid, label }
}

/// Class names in sorted order; the id of a class is its index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub names: Vec<String>,
}

impl LabelMap {
    pub fn from_records(records: &[FlowRecord]) -> Self {
        let mut names: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Encoded samples packed back to back (`[N, 1, 20, 2]`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub const SAMPLE_LEN: usize = MTS_LEN * MTS_VARS;

    pub fn encode(records: &[FlowRecord], labels: &LabelMap) -> Result<Self> {
        let mut ds = Dataset::default();
        for r in records {
            let k = labels.id(&r.label).ok_or_else(|| Error::Config(format!("flow `{}` has unknown label `{}`", r.flow_id, r.label)))?;
            ds.push(&encode_flow(r, k).grid.into_data(), k, r.flow_id.clone());
        }
        Ok(ds)
    }

    pub fn push(&mut self, grid: &[f32], label: usize, id: String) {
        assert_eq!(grid.len(), Self::SAMPLE_LEN, "sample length");
        self.inputs.extend_from_slice(grid);
        self.labels.push(label);
        self.ids.push(id);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * Self::SAMPLE_LEN..(i + 1) * Self::SAMPLE_LEN]
    }

    pub fn sample(&self, i: usize) -> MtsSample {
        MtsSample { grid: Tensor::from_vec(&[1, MTS_LEN, MTS_VARS], self.input(i).to_vec()).expect("grid shape"), label: self.labels[i] }
    }

    /// Rows `idx` in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut ds = Dataset::default();
        for &i in idx {
            ds.push(self.input(i), self.labels[i], self.ids[i].clone());
        }
        ds
    }

    pub fn indices_of(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == k).collect()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &k in &self.labels {
            c[k] += 1;
        }
        c
    }
}

/// Train and test flows with the label map built from the training side.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub labels: LabelMap,
}

impl DatasetSplit {
    pub fn encode(train: &[FlowRecord], test: &[FlowRecord]) -> Result<Self> {
        let labels = LabelMap::from_records(train);
        for r in test {
            if labels.id(&r.label).is_none() {
                return Err(Error::EmptyClass(r.label.clone()));
            }
        }
        Ok(Self { train: Dataset::encode(train, &labels)?, test: Dataset::encode(test, &labels)?, labels })
    }
}

/// Splits per class, keeping `round(n · test_fraction)` (at least one, at most
/// `n - 1`) of each class in the test side. Both sides keep file order.
pub fn stratified_split(records: &[FlowRecord], test_fraction: f64, seed: u64) -> Result<(Vec<FlowRecord>, Vec<FlowRecord>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; records.len()];
    for (label, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Config(format!("class `{label}` has a single record and cannot be split")));
        }
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(is_test) {
        if t { test.push(r.clone()) } else { train.push(r.clone()) }
    }
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerKind {
    Size,
    Dir,
}

/// A planted class signature. `value` is a size in bytes for size markers and
/// `+1` (up) or `-1` (down) for direction markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub pos: usize,
    pub kind: MarkerKind,
    pub value: i64,
}

impl Marker {
    /// Input cell `(packet, variable)` carrying the marker.
    pub fn cell(&self) -> (usize, usize) {
        match self.kind {
            MarkerKind::Size => (self.pos, 0),
            MarkerKind::Dir => (self.pos, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub class: String,
    pub markers: Vec<Marker>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub flows_per_class: Vec<usize>,
    /// Marker size jitter is `± round(noise · 20)` bytes.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn balanced(classes: usize, flows: usize, noise: f64, seed: u64) -> Self {
        Self { flows_per_class: vec![flows; classes], noise, seed }
    }

    /// Class sizes on a linear ramp from `ratio · lo` down to `lo`, averaging `mean`.
    pub fn imbalanced(classes: usize, mean: usize, ratio: f64, noise: f64, seed: u64) -> Self {
        let lo = 2.0 * mean as f64 / (1.0 + ratio);
        let hi = ratio * lo;
        let flows_per_class = (0..classes)
            .map(|k| {
                let t = if classes > 1 { k as f64 / (classes - 1) as f64 } else { 0.0 };
                (hi + (lo - hi) * t).round() as usize
            })
            .collect();
        Self { flows_per_class, noise, seed }
    }
}

/// Markers are placed among the first packets so every flow carries them.
const MARKER_SPAN: usize = 12;
const MIN_FLOW_LEN: usize = 4;
const MAX_FLOW_LEN: usize = 32;
/// Marker sizes are small packets; background packets are drawn above them.
const MIN_SIZE: i64 = 40;
const MARKER_MAX_SIZE: i64 = 600;
const BACKGROUND_MIN_SIZE: i64 = 640;
const MAX_SIZE: i64 = 1500;
/// Minimum gap between neighbouring marker bands.
const GUARD: i64 = 8;

pub fn class_name(k: usize) -> String {
    format!("app{k:02}")
}

/// Generates a labelled corpus in which each class carries one to three
/// planted markers: always a class-unique small packet size at a fixed
/// position (positions are distinct across classes while there are enough of
/// them), plus optional further size or direction markers. Remaining packets
/// are noise drawn above every marker size band.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Vec<FlowRecord>, Vec<Signature>)> {
    let k = cfg.flows_per_class.len();
    if k < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::Config(format!("noise {} must lie in [0, 1]", cfg.noise)));
    }
    let band = (cfg.noise * 20.0).round() as i64;
    let slot = (MARKER_MAX_SIZE - MIN_SIZE) / (k as i64 + 1);
    if slot < 2 * band + GUARD {
        return Err(Error::Config(format!("{k} classes do not fit distinct size bands at noise {}", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut primaries: Vec<i64> = (1..=k as i64).map(|i| MIN_SIZE + i * slot).collect();
    primaries.shuffle(&mut rng);

    let mut primary_pos: Vec<usize> = Vec::with_capacity(k);
    while primary_pos.len() < k {
        let mut round: Vec<usize> = (0..MARKER_SPAN).collect();
        round.shuffle(&mut rng);
        primary_pos.extend(round.into_iter().take(k - primary_pos.len()));
    }

    let mut signatures = Vec::with_capacity(k);
    let mut transports = Vec::with_capacity(k);
    for (c, &primary) in primaries.iter().enumerate() {
        let mut others: Vec<usize> = (0..MARKER_SPAN).filter(|&p| p != primary_pos[c]).collect();
        others.shuffle(&mut rng);
        let n_markers = rng.random_range(1..=3);
        let mut markers = vec![Marker { pos: primary_pos[c], kind: MarkerKind::Size, value: primary }];
        for &pos in &others[..n_markers - 1] {
            // Extra size markers reuse the class's own band so that no band is shared between classes.
            markers.push(if rng.random_bool(0.5) {
                Marker { pos, kind: MarkerKind::Dir, value: if rng.random_bool(0.5) { 1 } else { -1 } }
            } else {
                Marker { pos, kind: MarkerKind::Size, value: primary }
            });
        }
        markers.sort_by_key(|m| m.pos);
        signatures.push(Signature { class: class_name(c), markers });
        transports.push(if rng.random_bool(0.5) { Transport::Tcp } else { Transport::Udp });
    }

    let background = |rng: &mut ChaCha8Rng| rng.random_range(BACKGROUND_MIN_SIZE..=MAX_SIZE) as u32;

    let mut records = Vec::with_capacity(cfg.flows_per_class.iter().sum());
    for (c, (&n, sig)) in cfg.flows_per_class.iter().zip(&signatures).enumerate() {
        let last_marker = sig.markers.iter().map(|m| m.pos).max().unwrap_or(0);
        for i in 0..n {
            let len = rng.random_range(MIN_FLOW_LEN.max(last_marker + 1)..=MAX_FLOW_LEN);
            let mut packets: Vec<Packet> = (0..len)
                .map(|_| Packet { size: background(&mut rng), dir: if rng.random_bool(0.5) { Direction::Up } else { Direction::Down } })
                .collect();
            for m in &sig.markers {
                match m.kind {
                    MarkerKind::Size => {
                        let jitter = if band > 0 { rng.random_range(-band..=band) } else { 0 };
                        packets[m.pos].size = (m.value + jitter) as u32;
                    }
                    MarkerKind::Dir => packets[m.pos].dir = if m.value > 0 { Direction::Up } else { Direction::Down },
                }
            }
            records.push(FlowRecord {
                flow_id: format!("{}-{i:05}", sig.class),
                label: sig.class.clone(),
                packets,
                transport: Some(transports[c]),
            });
        }
    }
    Ok((records, signatures))
}

pub fn write_signatures(path: &Path, signatures: &[Signature]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in signatures {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_signatures(path: &Path) -> Result<Vec<Signature>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

/// File names inside a data directory.
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const FLOWS_FILE: &str = "flows.csv";
pub const SIGNATURES_FILE: &str = "signatures.jsonl";

/// Raw train and test records of a data directory: `train.csv` + optional
/// `test.csv`, or a single `flows.csv` split in halves per class with `seed`.
pub fn read_data_dir(dir: &Path, seed: u64) -> Result<(Vec<FlowRecord>, Vec<FlowRecord>)> {
    let p = |f: &str| -> PathBuf { dir.join(f) };
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("data directory {} not found", dir.display()))));
    }
    if p(TRAIN_FILE).exists() {
        let train = parse_flows(&p(TRAIN_FILE), FlowFormat::Csv)?;
        let test = if p(TEST_FILE).exists() { parse_flows(&p(TEST_FILE), FlowFormat::Csv)? } else { Vec::new() };
        Ok((train, test))
    } else if p(FLOWS_FILE).exists() {
        stratified_split(&parse_flows(&p(FLOWS_FILE), FlowFormat::Csv)?, 0.5, seed)
    } else {
        Err(Error::Config(format!("{} holds neither {TRAIN_FILE} nor {FLOWS_FILE}", dir.display())))
    }
}

/// [`read_data_dir`], encoded with the label map of the training side.
pub fn load_data_dir(dir: &Path, seed: u64) -> Result<DatasetSplit> {
    let (train, test) = read_data_dir(dir, seed)?;
    DatasetSplit::encode(&train, &test)
}
