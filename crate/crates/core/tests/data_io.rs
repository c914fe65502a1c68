use mdgru::data_io::*;
use mdgru::pipeline::{Landmark, Volume};
use mdgru::{Error, Float, Tensor};
use proptest::prelude::*;
use tempfile::TempDir;

fn volume(dims: [usize; 3], values: Vec<Float>, spacing: [Float; 3]) -> Volume {
    Volume::new(Tensor::new(dims.to_vec(), values).unwrap(), spacing).unwrap()
}

fn offset_of(e: Error) -> u64 {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

fn any_finite() -> impl Strategy<Value = Float> {
    prop_oneof![
        -1e6f64..1e6,
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
    ]
}

fn dims_and_values() -> impl Strategy<Value = ([usize; 3], Vec<Float>)> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(x, y, z)| {
        (Just([x, y, z]), prop::collection::vec(any_finite(), x * y * z))
    })
}

fn spacing() -> impl Strategy<Value = [Float; 3]> {
    prop::array::uniform3(1e-3f64..1e3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rvol_f64_round_trip((dims, values) in dims_and_values(), sp in spacing()) {
        let v = volume(dims, values, sp);
        let bytes = encode_volume(&v, Dtype::F64);
        prop_assert_eq!(bytes.len(), RVOL_HEADER_LEN + 8 * v.data.len());
        let (back, dtype) = decode_volume(&bytes).unwrap();
        prop_assert_eq!(dtype, Dtype::F64);
        prop_assert_eq!(&back.data, &v.data);
        prop_assert_eq!(back.spacing, v.spacing);
        prop_assert_eq!(encode_volume(&back, Dtype::F64), bytes);
    }

    #[test]
    fn rvol_f32_round_trip((dims, values) in dims_and_values(), sp in spacing()) {
        let values: Vec<Float> = values.iter().map(|&v| v as f32 as Float).collect();
        let v = volume(dims, values, sp);
        let bytes = encode_volume(&v, Dtype::F32);
        let (back, dtype) = decode_volume(&bytes).unwrap();
        prop_assert_eq!(dtype, Dtype::F32);
        prop_assert_eq!(&back.data, &v.data);
        prop_assert_eq!(encode_volume(&back, Dtype::F32), bytes);
    }

    #[test]
    fn landmark_round_trip(c in prop::array::uniform3(any_finite())) {
        let l = Landmark::original(c);
        let back = parse_landmark(&format_landmark(&l)).unwrap();
        prop_assert_eq!(back.coords, l.coords);
    }

    /// Any strict prefix, and any extension, of a valid file is rejected with an offset.
    #[test]
    fn truncated_or_padded_files_are_rejected((dims, values) in dims_and_values(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_volume(&volume(dims, values, [1.0; 3]), Dtype::F64);
        let len = cut.index(bytes.len());
        let off = offset_of(decode_volume(&bytes[..len]).unwrap_err());
        prop_assert!(off as usize <= RVOL_HEADER_LEN);
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert_eq!(offset_of(decode_volume(&longer).unwrap_err()), RVOL_HEADER_LEN as u64);
    }
}

#[test]
fn corrupted_header_fields_name_their_offset() {
    let v = volume([2, 3, 4], (0..24).map(|i| i as Float).collect(), [0.5, 1.0, 2.0]);
    let good = encode_volume(&v, Dtype::F64);
    assert_eq!(good.len() - RVOL_HEADER_LEN, 192);

    let corrupt = |at: usize, bytes: &[u8]| {
        let mut b = good.clone();
        b[at..at + bytes.len()].copy_from_slice(bytes);
        decode_volume(&b).unwrap_err()
    };
    assert_eq!(offset_of(corrupt(0, b"RVOX")), 0);
    assert_eq!(offset_of(corrupt(4, &2u32.to_le_bytes())), 4);
    assert_eq!(offset_of(corrupt(12, &0u32.to_le_bytes())), 8);
    assert_eq!(offset_of(corrupt(28, &(-1.0f64).to_le_bytes())), 20);
    assert_eq!(offset_of(corrupt(36, &f64::NAN.to_le_bytes())), 20);
    assert_eq!(offset_of(corrupt(44, &[7])), 44);
    // A larger declared extent makes the payload too short.
    let e = corrupt(8, &3u32.to_le_bytes());
    assert_eq!(offset_of(e), RVOL_HEADER_LEN as u64);
    let e = corrupt(8, &3u32.to_le_bytes());
    assert!(e.to_string().contains("expected 288 bytes, found 192"), "{e}");
    // f32 code on an f64 payload halves the expected length.
    assert_eq!(offset_of(corrupt(44, &[0])), RVOL_HEADER_LEN as u64);
    let e = decode_volume(&good[..10]).unwrap_err();
    assert!(e.to_string().contains("expected 45 bytes, found 10"), "{e}");
}

#[test]
fn landmark_text_errors_carry_line_numbers() {
    let l = parse_landmark("12.25 40.0 7.5").unwrap();
    assert_eq!(l.coords, [12.25, 40.0, 7.5]);
    let l = parse_landmark("# comment\n\n1 2 3\n").unwrap();
    assert_eq!(l.coords, [1.0, 2.0, 3.0]);
    let line = |text: &str| match parse_landmark(text).unwrap_err() {
        Error::Parse { line, .. } => line,
        other => panic!("{other}"),
    };
    assert_eq!(line("# c\n1 2"), 2);
    assert_eq!(line("1 2 x"), 1);
    assert_eq!(line("1 2 3\n# c\n4 5 6"), 3);
    assert_eq!(line("1 2 inf"), 1);
    assert_eq!(line("# only a comment"), 1);
}

#[test]
fn manifests_reject_split_overlap_on_load() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("manifest.tsv");
    std::fs::write(&path, "a\tv/a.rvol\tl/a.txt\ttrain\nb\tv/b.rvol\tl/b.txt\ttest\na\tv/a2.rvol\tl/a2.txt\ttest\n")
        .unwrap();
    assert!(matches!(Manifest::load(&path), Err(Error::Config(_))));
    std::fs::write(&path, "a\tv/a.rvol\tl/a.txt\ttrain\na\tv/a2.rvol\tl/a2.txt\ttrain\n").unwrap();
    let m = Manifest::load(&path).unwrap();
    assert_eq!(m.split(Split::Train).count(), 2);
    assert_eq!(m.resolve(&m.entries[0].volume), tmp.path().join("v/a.rvol"));
    std::fs::write(&path, "a\tv/a.rvol\ttrain\n").unwrap();
    assert!(matches!(Manifest::load(&path), Err(Error::Parse { line: 1, .. })));
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        extents: [20, 24, 16],
        spacing: [1.0, 1.2, 0.8],
        background_scale: 8.0,
        background_amplitude: 0.3,
        notch_depth: 1.0,
        notch_width: [2.0, 3.0, 4.5],
        noise: 0.05,
        margin: 5,
        seed: 3,
        split_weights: [8.0, 1.0, 1.0],
    }
}

#[test]
fn synthetic_datasets_regenerate_identically() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = generate_synthetic(&small_spec(), 10, &a).unwrap();
    let mb = generate_synthetic(&small_spec(), 10, &b).unwrap();
    assert_eq!(ma.entries, mb.entries);
    for e in &ma.entries {
        assert_eq!(std::fs::read(ma.resolve(&e.volume)).unwrap(), std::fs::read(mb.resolve(&e.volume)).unwrap());
        assert_eq!(
            std::fs::read(ma.resolve(&e.landmark)).unwrap(),
            std::fs::read(mb.resolve(&e.landmark)).unwrap()
        );
        let (v, l) = ma.load_entry(e).unwrap();
        assert_eq!(v.spacing, [1.0, 1.2, 0.8]);
        for ax in 0..3 {
            assert!(l.coords[ax] >= 5.0 && l.coords[ax] <= (v.extents()[ax] - 6) as Float);
        }
    }
    assert_eq!(split_counts(10, [8.0, 1.0, 1.0]), [8, 1, 1]);
    let reloaded = Manifest::load(&a.join("manifest.tsv")).unwrap();
    assert_eq!(reloaded.entries, ma.entries);
}

#[test]
fn noiseless_apex_is_the_global_minimum() {
    let spec = SynthSpec {
        background_amplitude: 0.0,
        noise: 0.0,
        ..small_spec()
    };
    for i in 0..20 {
        let (v, l) = synthesize_subject(&spec, i).unwrap();
        let data = v.data.data();
        let (best, _) = data
            .iter()
            .enumerate()
            .fold((0, Float::INFINITY), |(bi, bv), (k, &x)| if x < bv { (k, x) } else { (bi, bv) });
        let [_, ny, nz] = v.extents();
        let found = [best / (ny * nz), (best / nz) % ny, best % nz].map(|c| c as Float);
        assert_eq!(found, l.coords, "subject {i}");
        // Unique: every other voxel is strictly brighter.
        assert_eq!(data.iter().filter(|&&x| x == data[best]).count(), 1);
    }
}
