use omdet::nn::{Group, Init, ParamStore};
use omdet::text::{embed_labels, fnv1a, to_omev, EmbeddingProvider, SetEncoder, Slot};
use omdet::Error;
use omdet_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn slots(words: &[&str]) -> Vec<Slot> {
    words.iter().map(|w| if w.is_empty() { None } else { Some(w.to_string()) }).collect()
}

#[test]
fn fnv1a_known_values() {
    assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
}

#[test]
fn hash_provider_is_deterministic_and_unit_norm() {
    let p = EmbeddingProvider::hash(32);
    let (t, mask) = embed_labels::<f64>(&p, &slots(&["circle", "circle", "ring"])).unwrap();
    assert_eq!(mask, vec![false; 3]);
    let rows: Vec<&[f64]> = t.data().chunks(32).collect();
    assert_eq!(rows[0], rows[1]);
    assert_ne!(rows[0], rows[2]);
    for r in rows {
        let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    // a fresh provider gives the same vector
    assert_eq!(EmbeddingProvider::hash(32).embed("circle").unwrap(), p.embed("circle").unwrap());
}

#[test]
fn pad_slot_is_a_zero_row_and_masked() {
    let p = EmbeddingProvider::hash(8);
    let (t, mask) = embed_labels::<f32>(&p, &slots(&["square", ""])).unwrap();
    assert_eq!(mask, vec![false, true]);
    assert!(t.data()[8..].iter().all(|&v| v == 0.0));
}

#[test]
fn empty_task_is_rejected() {
    let p = EmbeddingProvider::hash(8);
    assert!(embed_labels::<f64>(&p, &[]).is_err());
}

fn two_entry_file() -> Vec<u8> {
    let a: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
    let b: Vec<f32> = (0..8).map(|i| if i == 2 { 4.0 } else { 0.0 }).collect();
    to_omev(8, &[("cat".into(), a), ("dog".into(), b)]).unwrap()
}

#[test]
fn file_provider_resolves_entries_and_names_missing_words() {
    let p = EmbeddingProvider::from_omev(&two_entry_file()).unwrap();
    assert_eq!(p.dim(), 8);
    let dog = p.embed("dog").unwrap();
    assert_eq!(dog, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let cat = p.embed("cat").unwrap();
    assert!((cat.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
    let err = p.embed("bird").unwrap_err();
    assert!(matches!(err, Error::Lookup(ref w) if w == "bird"));
    assert!(err.to_string().contains("bird"));
}

#[test]
fn empty_file_is_a_valid_empty_provider() {
    let p = EmbeddingProvider::from_omev(&to_omev(4, &[]).unwrap()).unwrap();
    assert_eq!(p.dim(), 4);
    assert!(p.embed("anything").is_err());
}

#[test]
fn round_trip_preserves_unit_vectors() {
    let mut rng_state = 7u64;
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng_state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
    };
    let entries: Vec<(String, Vec<f32>)> = (0..5)
        .map(|i| {
            let v: Vec<f32> = (0..16).map(|_| next()).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            (format!("w{i}"), v.iter().map(|x| x / n).collect())
        })
        .collect();
    let tmp = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(tmp.path(), to_omev(16, &entries).unwrap()).unwrap();
    let p = EmbeddingProvider::load(tmp.path()).unwrap();
    for (name, v) in &entries {
        let got = p.embed(name).unwrap();
        for (a, b) in got.iter().zip(v) {
            assert!((a - f64::from(*b)).abs() < 1e-7);
        }
    }
}

fn format_offset(bytes: &[u8]) -> usize {
    match EmbeddingProvider::from_omev(bytes).unwrap_err() {
        Error::Format { offset, .. } => offset,
        e => panic!("expected a format error, got {e}"),
    }
}

#[test]
fn malformed_files_report_byte_offsets() {
    let good = two_entry_file();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(format_offset(&bad), 0);
    let mut bad = good.clone();
    bad[4] = 2;
    assert_eq!(format_offset(&bad), 4);
    // header is 16 bytes; first entry is 2 + 3 + 32 bytes
    assert_eq!(format_offset(&good[..30]), 29);
    let second = 16 + 2 + 3 + 32;
    assert_eq!(format_offset(&good[..second + 1]), second);
    let mut long = good.clone();
    long.push(0);
    assert_eq!(format_offset(&long), good.len());
    let v = vec![1.0f32; 8];
    let dup = to_omev(8, &[("a".into(), v.clone()), ("a".into(), v)]).unwrap();
    assert_eq!(format_offset(&dup), 16 + 2 + 1 + 32);
    let zero = to_omev(2, &[("z".into(), vec![0.0, 0.0])]).unwrap();
    assert_eq!(format_offset(&zero), 16 + 2 + 1);
}

fn encoder(seed: u64) -> (ParamStore<f64>, SetEncoder) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let enc = SetEncoder::new(&mut store, &mut init, "enc", 8, 16, 2, 4, Group::TaskEncoder).unwrap();
    (store, enc)
}

fn encode(store: &ParamStore<f64>, enc: &SetEncoder, raw: Tensor<f64>, pad: &[bool]) -> Vec<Vec<f64>> {
    let mut t = Tape::new();
    let p = store.bind(&mut t, |_, _| false);
    let x = t.constant(raw);
    let y = enc.forward(&mut t, &p, x, pad).unwrap();
    t.value(y).to_f64_vec().chunks(16).map(<[f64]>::to_vec).collect()
}

fn raw_rows(p: &EmbeddingProvider, words: &[&str]) -> (Tensor<f64>, Vec<bool>) {
    embed_labels(p, &slots(words)).unwrap()
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn permuting_words_permutes_output_rows(perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle(), seed in 0u64..50) {
        let (store, enc) = encoder(seed);
        let p = EmbeddingProvider::hash(8);
        let words = ["circle", "square", "", "triangle", "ring"];
        let (raw, pad) = raw_rows(&p, &words);
        let base = encode(&store, &enc, raw, &pad);
        let permuted: Vec<&str> = perm.iter().map(|&i| words[i]).collect();
        let (raw2, pad2) = raw_rows(&p, &permuted);
        let out = encode(&store, &enc, raw2, &pad2);
        for (row, &i) in perm.iter().enumerate() {
            prop_assert!(close(&out[row], &base[i], 1e-5));
        }
    }
}

#[test]
fn single_word_output_depends_only_on_that_word() {
    let (store, enc) = encoder(1);
    let p = EmbeddingProvider::hash(8);
    let (raw, pad) = raw_rows(&p, &["cross"]);
    let a = encode(&store, &enc, raw.clone(), &pad);
    let b = encode(&store, &enc, raw, &pad);
    assert_eq!(a, b);
    // a pad next to it changes nothing
    let (raw2, pad2) = raw_rows(&p, &["cross", ""]);
    let c = encode(&store, &enc, raw2, &pad2);
    assert!(close(&a[0], &c[0], 1e-12));
    let (raw3, pad3) = raw_rows(&p, &["ring"]);
    assert_ne!(a, encode(&store, &enc, raw3, &pad3));
}

#[test]
fn pad_rows_are_zero_and_invisible_to_real_rows() {
    let (store, enc) = encoder(2);
    let p = EmbeddingProvider::hash(8);
    let (raw, pad) = raw_rows(&p, &["circle", "", "ring", ""]);
    let base = encode(&store, &enc, raw.clone(), &pad);
    assert!(base[1].iter().chain(&base[3]).all(|&v| v == 0.0));
    // garbage in the pad rows cannot leak into the real rows
    let mut junk = raw.data().to_vec();
    for v in &mut junk[8..16] {
        *v = 9.0;
    }
    for v in &mut junk[24..32] {
        *v = -4.0;
    }
    let out = encode(&store, &enc, Tensor::new(vec![4, 8], junk).unwrap(), &pad);
    assert!(close(&out[0], &base[0], 1e-12) && close(&out[2], &base[2], 1e-12));
    assert!(out[1].iter().chain(&out[3]).all(|&v| v == 0.0));
}

#[test]
fn task_and_label_encoders_have_disjoint_parameters() {
    let model = omdet::mdn::Model::<f32>::new(Default::default(), 0).unwrap();
    let names = |g: Group| -> Vec<String> {
        model.params.iter().filter(|(_, _, p)| p.group == g).map(|(_, n, _)| n.to_string()).collect()
    };
    let task = names(Group::TaskEncoder);
    let label = names(Group::LabelEncoder);
    assert!(!task.is_empty() && task.len() == label.len());
    assert!(task.iter().all(|n| n.starts_with("task_encoder.")));
    assert!(label.iter().all(|n| n.starts_with("label_encoder.")));
    // same architecture, independently initialized
    let a = model.params.value(model.params.find("task_encoder.proj.weight").unwrap());
    let b = model.params.value(model.params.find("label_encoder.proj.weight").unwrap());
    assert_eq!(a.shape(), b.shape());
    assert_ne!(a.data(), b.data());
}
