mod common;

use std::path::Path;

use evprobe::trace::{
    fallback_label, read_labels, write_labels, Condition, DatasetManifest, DatasetReader, DatasetWriter, JudgeKind,
    LabelRecord, LabelSet, TraceKey,
};
use evprobe::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write(path: &Path, manifest: DatasetManifest, traces: &[evprobe::trace::GenerationTrace]) {
    let mut w = DatasetWriter::create(path, manifest).unwrap();
    for t in traces {
        w.append(t).unwrap();
    }
    w.finish().unwrap();
}

fn records_start(bytes: &[u8]) -> usize {
    16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

#[test]
fn hundred_random_round_trips_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let k = rng.gen_range(2..=24);
        let d = rng.gen_range(1..=16);
        let n_layers = rng.gen_range(1..=4);
        let layers: Vec<u32> = (0..n_layers).map(|i| i * 3 + rng.gen_range(0..3)).collect();
        let traces: Vec<_> = (0..rng.gen_range(1..=4))
            .map(|s| common::random_trace(&mut rng, k, &layers, d, &format!("case-{case}"), s))
            .collect();
        let path = dir.path().join(format!("{case}.evpt"));
        write(&path, DatasetManifest::new("m", k, layers.clone(), d), &traces);
        let reader = DatasetReader::open(&path).unwrap();
        assert_eq!(reader.len(), traces.len());
        for t in &traces {
            let back = reader.read_trace(&t.question_id, t.condition, t.sample_index).unwrap();
            assert_eq!(&back, t);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(back.topk_logits.as_slice()), bits(t.topk_logits.as_slice()));
            assert_eq!(back.p_true.map(f64::to_bits), t.p_true.map(f64::to_bits));
        }
        assert!(reader.check_all().is_empty());
    }
}

#[test]
fn every_single_byte_corruption_in_records_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let traces: Vec<_> = (0..3).map(|s| common::random_trace(&mut rng, 4, &[5], 3, "q", s)).collect();
    let path = dir.path().join("clean.evpt");
    write(&path, DatasetManifest::new("m", 4, vec![5], 3), &traces);
    let clean = std::fs::read(&path).unwrap();
    let start = records_start(&clean);
    let bad = dir.path().join("bad.evpt");
    for pos in start..clean.len() {
        let mut bytes = clean.clone();
        bytes[pos] ^= rng.gen_range(1..=255u8);
        std::fs::write(&bad, &bytes).unwrap();
        let reader = DatasetReader::open(&bad).unwrap();
        let findings = reader.check_all();
        assert_eq!(findings.len(), 1, "flip at byte {pos} gave {findings:?}");
        assert!(matches!(findings[0].1, Error::Integrity(_)));
    }
}

#[test]
fn truncation_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let traces: Vec<_> = (0..2).map(|s| common::random_trace(&mut rng, 4, &[0], 2, "q", s)).collect();
    let path = dir.path().join("t.evpt");
    write(&path, DatasetManifest::new("m", 4, vec![0], 2), &traces);
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 10, 20, records_start(&bytes) + 5, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let outcome = DatasetReader::open(&path).map(|r| r.check_all());
        match outcome {
            Err(e) => assert!(matches!(e, Error::Integrity(_)), "cut {cut}: {e}"),
            Ok(findings) => assert!(!findings.is_empty(), "cut {cut} went unnoticed"),
        }
    }
}

#[test]
fn unknown_trace_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = common::random_trace(&mut rng, 2, &[0], 4, "known", 0);
    let path = dir.path().join("x.evpt");
    write(&path, DatasetManifest::new("m", 2, vec![0], 4), &[t]);
    let reader = DatasetReader::open(&path).unwrap();
    assert!(matches!(reader.read_trace("unknown", Condition::Woc, 0), Err(Error::NotFound(_))));
}

#[test]
fn label_files_are_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = LabelSet::new();
    for q in 0..20 {
        for s in 0..3 {
            set.insert(LabelRecord {
                question_id: format!("q{q}"),
                condition: [Condition::Woc, Condition::Wcc, Condition::Wic][s % 3],
                sample_index: s as u32,
                z: rng.gen_range(0..=1),
                exact_answer_span: rng.gen_bool(0.5).then_some([0, 2]),
                judge: JudgeKind::Llm,
                flagged: rng.gen_bool(0.1),
            })
            .unwrap();
        }
    }
    let a = dir.path().join("a.jsonl");
    write_labels(&a, &set).unwrap();
    let mut lines: Vec<String> = std::fs::read_to_string(&a).unwrap().lines().map(str::to_owned).collect();
    lines.shuffle(&mut rng);
    let b = dir.path().join("b.jsonl");
    std::fs::write(&b, lines.join("\n") + "\n").unwrap();
    let (la, lb) = (read_labels(&a).unwrap(), read_labels(&b).unwrap());
    assert_eq!(la, lb);
    assert_eq!(la, set);
}

#[test]
fn fallback_judge_examples() {
    let key = TraceKey::new("q", Condition::Woc, 0);
    let l = fallback_label(key.clone(), "Paris", "paris.", 0.5);
    assert_eq!((l.z, l.judge), (1, JudgeKind::ExactMatch));
    let l = fallback_label(key.clone(), "the capital is Paris", "Paris", 0.5);
    assert_eq!((l.z, l.judge), (0, JudgeKind::TokenF1));
    assert_eq!(fallback_label(key, "London", "Paris", 0.5).z, 0);
}
