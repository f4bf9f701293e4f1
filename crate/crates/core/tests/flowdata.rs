use std::io::Cursor;
use std::path::Path;

use lexnet::flowdata::*;
use lexnet::Error;
use proptest::prelude::*;

fn csv(text: &str) -> lexnet::Result<Vec<FlowRecord>> {
    parse_flows_from(Cursor::new(text.as_bytes()), FlowFormat::Csv, Path::new("mem.csv"))
}

#[test]
fn parses_schema_row() {
    let recs = csv("flow_id,label,sizes,dirs\nf1,app1,44;1480;60,U;D;U\n").unwrap();
    assert_eq!(recs.len(), 1);
    let r = &recs[0];
    assert_eq!((r.flow_id.as_str(), r.label.as_str()), ("f1", "app1"));
    let sizes: Vec<u32> = r.packets.iter().map(|p| p.size).collect();
    let dirs: Vec<Direction> = r.packets.iter().map(|p| p.dir).collect();
    assert_eq!(sizes, [44, 1480, 60]);
    assert_eq!(dirs, [Direction::Up, Direction::Down, Direction::Up]);
    assert_eq!(r.transport, None);
}

#[test]
fn optional_transport_column() {
    let recs = csv("flow_id,label,sizes,dirs,transport\na,x,1,U,tcp\nb,x,2,D,\n").unwrap();
    assert_eq!(recs[0].transport, Some(Transport::Tcp));
    assert_eq!(recs[1].transport, None);
}

fn parse_error_line(text: &str) -> usize {
    match csv(text) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_rows_report_their_line() {
    let head = "flow_id,label,sizes,dirs\nok,a,1;2,U;D\n";
    assert_eq!(parse_error_line(&format!("{head}bad,a,1;2,U;D;U\n")), 3);
    assert_eq!(parse_error_line(&format!("{head}ok2,a,5,D\nbad,a,1;x,U;D\n")), 4);
    assert_eq!(parse_error_line(&format!("{head}bad,a,1,Q\n")), 3);
    assert_eq!(parse_error_line(&format!("{head}bad,a,70000,U\n")), 3);
    assert_eq!(parse_error_line("flow_id,label,sizes\nx,a,1\n"), 1);
}

#[test]
fn empty_file_is_empty_list() {
    assert!(csv("").unwrap().is_empty());
    let j = parse_flows_from(Cursor::new(b"".as_slice()), FlowFormat::Jsonl, Path::new("e.jsonl")).unwrap();
    assert!(j.is_empty());
}

#[test]
fn jsonl_mirror_and_round_trip() {
    let line = r#"{"flow_id":"f1","label":"app1","sizes":[44,1480,60],"dirs":["U","D","U"]}"#;
    let j = parse_flows_from(Cursor::new(line.as_bytes()), FlowFormat::Jsonl, Path::new("m.jsonl")).unwrap();
    assert_eq!(j, csv("flow_id,label,sizes,dirs\nf1,app1,44;1480;60,U;D;U\n").unwrap());

    let (records, _) = synth_generate(&SynthConfig::balanced(3, 5, 0.1, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, fmt) in [("f.csv", FlowFormat::Csv), ("f.jsonl", FlowFormat::Jsonl)] {
        let p = dir.path().join(name);
        write_flows(&p, &records, fmt).unwrap();
        assert_eq!(FlowFormat::from_path(&p), fmt);
        assert_eq!(parse_flows(&p, fmt).unwrap(), records);
    }
}

fn flow(sizes: &[u32]) -> FlowRecord {
    FlowRecord {
        flow_id: "f".into(),
        label: "a".into(),
        packets: sizes.iter().map(|&size| Packet { size, dir: Direction::Down }).collect(),
        transport: None,
    }
}

#[test]
fn encode_scales_pads_and_clamps() {
    let g = encode_flow(&flow(&[1000, 44, 7]), 3).grid;
    assert_eq!(g.shape(), &[1, MTS_LEN, MTS_VARS]);
    let d = g.data();
    assert_eq!(d[2], 44.0f32 / 1500.0);
    assert!((d[2] - 0.02933).abs() < 1e-5);
    assert_eq!(d[3], -1.0);
    assert!(d[6..].iter().all(|&v| v == 0.0));
    assert_eq!(d[6..].len(), 17 * 2);

    let g = encode_flow(&flow(&[20_000]), 0).grid;
    assert_eq!(g.data()[0], 1.0);

    let long: Vec<u32> = (0..30).collect();
    let g = encode_flow(&flow(&long), 0).grid;
    assert_eq!(g.data()[2 * 19], 19.0 / 1500.0);
}

#[test]
fn synthetic_markers_are_honored() {
    let (records, sigs) = synth_generate(&SynthConfig::balanced(6, 40, 0.1, 3)).unwrap();
    assert_eq!(records.len(), 240);
    let band = 2;
    for r in &records {
        let sig = sigs.iter().find(|s| s.class == r.label).unwrap();
        assert!((1..=3).contains(&sig.markers.len()));
        assert!(r.packets.len() <= 32);
        for m in &sig.markers {
            let p = r.packets[m.pos];
            match m.kind {
                MarkerKind::Size => assert!((p.size as i64 - m.value).abs() <= band),
                MarkerKind::Dir => assert_eq!(p.dir.sign() as i64, m.value),
            }
        }
    }
    // Primary size bands are class-unique.
    let mut primaries: Vec<i64> = sigs
        .iter()
        .map(|s| s.markers.iter().find(|m| m.kind == MarkerKind::Size).unwrap().value)
        .collect();
    primaries.sort();
    primaries.dedup();
    assert_eq!(primaries.len(), sigs.len());
}

#[test]
fn noise_free_marker_cells_are_constant_within_class() {
    let (records, sigs) = synth_generate(&SynthConfig::balanced(4, 30, 0.0, 9)).unwrap();
    for sig in &sigs {
        let cls: Vec<&FlowRecord> = records.iter().filter(|r| r.label == sig.class).collect();
        for m in &sig.markers {
            let first = cls[0].packets[m.pos];
            for r in &cls {
                let p = r.packets[m.pos];
                match m.kind {
                    MarkerKind::Size => assert_eq!(p.size, first.size),
                    MarkerKind::Dir => assert_eq!(p.dir, first.dir),
                }
            }
        }
    }
}

#[test]
fn synthetic_is_seed_deterministic() {
    let cfg = SynthConfig::imbalanced(5, 50, 4.0, 0.1, 21);
    assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    let other = SynthConfig { seed: 22, ..cfg };
    assert_ne!(synth_generate(&other).unwrap().0, synth_generate(&SynthConfig::imbalanced(5, 50, 4.0, 0.1, 21)).unwrap().0);
}

#[test]
fn synthetic_rejects_bad_params() {
    assert!(synth_generate(&SynthConfig::balanced(1, 10, 0.1, 0)).is_err());
    assert!(synth_generate(&SynthConfig::balanced(3, 10, 1.5, 0)).is_err());
    assert!(synth_generate(&SynthConfig::balanced(200, 10, 1.0, 0)).is_err());
}

#[test]
fn imbalanced_ramp() {
    let cfg = SynthConfig::imbalanced(10, 200, 4.0, 0.1, 0);
    assert_eq!(cfg.flows_per_class[0], 320);
    assert_eq!(cfg.flows_per_class[9], 80);
    assert_eq!(cfg.flows_per_class.iter().sum::<usize>(), 2000);
}

/// Each class is scored by the squared distance between the sample and that
/// class's centroid, restricted to the class's own marker cells.
#[test]
fn nearest_centroid_on_marker_cells_is_perfect_without_noise() {
    let (records, sigs) = synth_generate(&SynthConfig::balanced(10, 50, 0.0, 5)).unwrap();
    let labels = LabelMap::from_records(&records);
    let ds = Dataset::encode(&records, &labels).unwrap();
    let k = labels.len();
    let cells: Vec<Vec<usize>> = (0..k)
        .map(|c| {
            let sig = sigs.iter().find(|s| s.class == labels.name(c)).unwrap();
            sig.markers.iter().map(|m| m.cell().0 * MTS_VARS + m.cell().1).collect()
        })
        .collect();
    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let idx = ds.indices_of(c);
            cells[c].iter().map(|&cell| idx.iter().map(|&i| ds.input(i)[cell] as f64).sum::<f64>() / idx.len() as f64).collect()
        })
        .collect();
    let correct = (0..ds.len())
        .filter(|&i| {
            let d = |c: usize| cells[c].iter().zip(&centroids[c]).map(|(&cell, m)| (ds.input(i)[cell] as f64 - m).powi(2)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
            best == ds.labels[i]
        })
        .count();
    assert_eq!(correct, ds.len());
}

#[test]
fn split_is_stratified_and_deterministic() {
    let (records, _) = synth_generate(&SynthConfig::balanced(10, 100, 0.1, 0)).unwrap();
    let (tr, te) = stratified_split(&records, 0.5, 4).unwrap();
    let split = DatasetSplit::encode(&tr, &te).unwrap();
    assert_eq!(split.train.class_counts(10), vec![50; 10]);
    assert_eq!(split.test.class_counts(10), vec![50; 10]);
    let mut ids: Vec<&String> = split.train.ids.iter().chain(&split.test.ids).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 1000);
    assert_eq!(stratified_split(&records, 0.5, 4).unwrap(), (tr, te));

    let cfg = SynthConfig { flows_per_class: vec![400, 100], noise: 0.1, seed: 1 };
    let (records, _) = synth_generate(&cfg).unwrap();
    let (tr, te) = stratified_split(&records, 0.5, 0).unwrap();
    let split = DatasetSplit::encode(&tr, &te).unwrap();
    assert_eq!(split.test.class_counts(2), vec![200, 50]);
    assert_eq!(split.train.class_counts(2), vec![200, 50]);
}

#[test]
fn split_rejects_singleton_class() {
    let mut one = flow(&[1]);
    one.label = "solo".into();
    let recs = vec![flow(&[1]), flow(&[2]), one];
    assert!(stratified_split(&recs, 0.5, 0).is_err());
}

#[test]
fn data_dir_single_file_is_halved() {
    let (records, sigs) = synth_generate(&SynthConfig::balanced(3, 10, 0.1, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_flows(&dir.path().join(FLOWS_FILE), &records, FlowFormat::Csv).unwrap();
    write_signatures(&dir.path().join(SIGNATURES_FILE), &sigs).unwrap();
    let split = load_data_dir(dir.path(), 0).unwrap();
    assert_eq!(split.train.len(), 15);
    assert_eq!(split.test.len(), 15);
    assert_eq!(read_signatures(&dir.path().join(SIGNATURES_FILE)).unwrap(), sigs);
    assert!(load_data_dir(tempfile::tempdir().unwrap().path(), 0).is_err());
}

fn arb_record() -> impl Strategy<Value = FlowRecord> {
    prop::collection::vec((0u32..=MAX_PACKET_SIZE, any::<bool>()), 1..40).prop_map(|ps| FlowRecord {
        flow_id: "r".into(),
        label: "l".into(),
        packets: ps.into_iter().map(|(size, up)| Packet { size, dir: if up { Direction::Up } else { Direction::Down } }).collect(),
        transport: None,
    })
}

proptest! {
    #[test]
    fn encoded_channels_stay_in_range(r in arb_record()) {
        let g = encode_flow(&r, 0).grid;
        for (t, cell) in g.data().chunks(2).enumerate() {
            prop_assert!((0.0..=1.0).contains(&cell[0]));
            prop_assert!([-1.0, 0.0, 1.0].contains(&cell[1]));
            if t >= r.packets.len() {
                prop_assert_eq!(cell, &[0.0, 0.0][..]);
            }
        }
    }

    #[test]
    fn csv_round_trip_preserves_order(rs in prop::collection::vec(arb_record(), 1..8)) {
        let rs: Vec<FlowRecord> = rs.into_iter().enumerate().map(|(i, mut r)| { r.flow_id = format!("f{i}"); r }).collect();
        let mut buf = Vec::new();
        {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.csv");
            write_flows(&p, &rs, FlowFormat::Csv).unwrap();
            buf.extend(std::fs::read(&p).unwrap());
        }
        let back = parse_flows_from(Cursor::new(buf), FlowFormat::Csv, Path::new("x.csv")).unwrap();
        prop_assert_eq!(back, rs);
    }
}
