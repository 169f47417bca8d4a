use std::path::Path;

use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

use super::format::*;
use super::*;
use crate::error::Error;
use crate::metrics::LabelMask;
use crate::net::{NetConfig, ParamSet, TrackerNet};
use crate::tensor::Tensor;

fn video_from(dims: (usize, usize, usize), f: impl Fn(usize) -> f32) -> Video {
    let n = dims.0 * dims.1 * dims.2;
    Video::new("v", dims, (0..n).map(f).collect(), (1.25, 0.75)).unwrap()
}

fn offset_of(err: Error) -> u64 {
    match err {
        Error::Format { offset, .. } => offset,
        other => panic!("expected format error, got {other}"),
    }
}

#[test]
fn video_rejects_bad_input() {
    assert!(Video::new("a", (1, 2, 2), vec![0.0; 4], (1.0, 1.0)).is_err());
    assert!(Video::new("a", (2, 2, 2), vec![0.0; 7], (1.0, 1.0)).is_err());
    assert!(Video::new("a", (2, 1, 1), vec![0.0, f32::NAN], (1.0, 1.0)).is_err());
    assert!(Video::new("a", (2, 1, 1), vec![0.0, 1.0], (0.0, 1.0)).is_err());
}

#[test]
fn preprocess_rescales_to_full_range() {
    let v = video_from((2, 3, 3), |i| 10.0 + 2.0 * i as f32);
    let out = preprocess(&v, (3, 3)).unwrap();
    assert!(!out.degenerate);
    let raw = out.video.raw();
    assert_eq!(raw[0], 0.0);
    assert_eq!(raw[17], 255.0);
    assert!((raw[1] - 15.0).abs() < 1e-4);
}

#[test]
fn constant_video_becomes_zeros_with_flag() {
    let out = preprocess(&video_from((2, 4, 4), |_| 7.0), (4, 4)).unwrap();
    assert!(out.degenerate);
    assert!(out.video.raw().iter().all(|&v| v == 0.0));
}

#[test]
fn preprocess_crops_center_window() {
    let v = video_from((2, 10, 10), |i| (i % 100) as f32);
    let out = preprocess(&v, (8, 8)).unwrap().video;
    assert_eq!(out.dims(), (2, 8, 8));
    let scale = 255.0 / 99.0;
    for y in 0..8 {
        for x in 0..8 {
            let src = ((y + 1) * 10 + (x + 1)) as f64;
            assert!((out.frame_slice(1)[y * 8 + x] as f64 - src * scale).abs() < 1e-3);
        }
    }
}

#[test]
fn preprocess_pads_with_zero_border() {
    let v = video_from((2, 6, 6), |i| 1.0 + (i % 36) as f32);
    let out = preprocess(&v, (8, 8)).unwrap().video;
    let f = out.frame_slice(0);
    for y in 0..8 {
        for x in 0..8 {
            let border = y == 0 || x == 0 || y == 7 || x == 7;
            if border {
                assert_eq!(f[y * 8 + x], 0.0);
            } else {
                let src = 1.0 + ((y - 1) * 6 + (x - 1)) as f64;
                assert!((f[y * 8 + x] as f64 - (src - 1.0) * 255.0 / 35.0).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn video_round_trip_is_bitwise() {
    let v = video_from((3, 4, 5), |i| (i as f32).sin() * 1e3 - 0.0);
    let bytes = encode_video(&v).unwrap();
    assert_eq!(bytes.len(), 36 + 4 * 60);
    assert_eq!(&bytes[..4], b"FVID");
    let back = decode_video(&bytes, Path::new("dir/v.fvid")).unwrap();
    assert_eq!(back.raw().iter().map(|f| f.to_bits()).collect::<Vec<_>>(), v.raw().iter().map(|f| f.to_bits()).collect::<Vec<_>>());
    assert_eq!(back.dims(), v.dims());
    assert_eq!(back.pixel_spacing_mm, v.pixel_spacing_mm);
    assert_eq!(back.id, "v");
}

#[test]
fn every_truncation_is_rejected_with_offset() {
    let v = video_from((2, 2, 3), |i| i as f32);
    let bytes = encode_video(&v).unwrap();
    for cut in 0..bytes.len() {
        let err = decode_video(&bytes[..cut], Path::new("t.fvid")).unwrap_err();
        assert!(offset_of(err) as usize <= cut, "cut {cut}");
    }
    let m = LabelMask::new((2, 3), vec![0, 1, 2, 3, 2, 1], (1.0, 2.0)).unwrap();
    let bytes = encode_mask(&m).unwrap();
    for cut in 0..bytes.len() {
        assert!(decode_mask(&bytes[..cut], Path::new("t.fmsk")).is_err());
    }
}

#[test]
fn header_errors_carry_offsets() {
    let v = video_from((2, 2, 2), |i| i as f32);
    let mut bytes = encode_video(&v).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(offset_of(decode_video(&bad, Path::new("x")).unwrap_err()), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(offset_of(decode_video(&bad, Path::new("x")).unwrap_err()), 4);
    bytes.push(0);
    assert_eq!(offset_of(decode_video(&bytes, Path::new("x")).unwrap_err()), bytes.len() as u64 - 1);
    // Reading a mask file as a video fails on the magic.
    let m = LabelMask::new((1, 1), vec![0], (1.0, 1.0)).unwrap();
    assert!(decode_video(&encode_mask(&m).unwrap(), Path::new("x")).is_err());
}

#[test]
fn mask_with_invalid_label_is_rejected() {
    let m = LabelMask::new((1, 2), vec![0, 3], (1.0, 1.0)).unwrap();
    let mut bytes = encode_mask(&m).unwrap();
    *bytes.last_mut().unwrap() = 7;
    assert_eq!(offset_of(decode_mask(&bytes, Path::new("m")).unwrap_err()), 32);
}

#[test]
fn checkpoint_round_trip_keeps_order_and_bits() {
    let net = TrackerNet::new(NetConfig {
        encoder_channels: vec![2, 4],
        input_size: (8, 8),
        ..NetConfig::default()
    })
    .unwrap();
    let mut p = net.init_params(5);
    p.insert("zz.scalar", Tensor::scalar(-0.0)).unwrap();
    p.insert("aa.nan", Tensor::new(&[2], vec![f64::NAN, f64::MIN_POSITIVE]).unwrap()).unwrap();
    let bytes = encode_checkpoint(&p).unwrap();
    let back = decode_checkpoint(&bytes, Path::new("c.fckp")).unwrap();
    assert!(back.bitwise_eq(&p));
    assert_eq!(back.names().collect::<Vec<_>>(), p.names().collect::<Vec<_>>());
    for cut in [0, 5, 11, 12, 20, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut], Path::new("c")).is_err());
    }
}

#[test]
fn checkpoint_with_duplicate_names_is_rejected() {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::scalar(1.0)).unwrap();
    let one = encode_checkpoint(&p).unwrap();
    let mut two = one.clone();
    two[8] = 2;
    two.extend_from_slice(&one[12..]);
    let err = decode_checkpoint(&two, Path::new("c")).unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let v = video_from((2, 3, 3), |i| i as f32 * 0.5);
    let vp = dir.path().join("case7.fvid");
    write_video(&vp, &v).unwrap();
    let back = read_video(&vp).unwrap();
    assert_eq!(back.raw(), v.raw());
    assert_eq!(back.id, "case7");
    let missing = read_video(&dir.path().join("nope.fvid")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}

fn write_sample(dir: &Path, id: &str, split: Split) -> ManifestEntry {
    let v = video_from((3, 2, 2), |i| i as f32);
    write_video(&dir.join(format!("{id}.fvid")), &v).unwrap();
    let m = LabelMask::new((2, 2), vec![0, 1, 2, 3], (1.25, 0.75)).unwrap();
    write_mask(&dir.join(format!("{id}_0.fmsk")), &m).unwrap();
    ManifestEntry {
        id: id.into(),
        video_path: format!("{id}.fvid"),
        mask_paths: vec![format!("{id}_0.fmsk")],
        mask_frames: vec![0],
        category: "inside".into(),
        split,
    }
}

#[test]
fn manifest_round_trip_and_loading() {
    let dir = tempfile::tempdir().unwrap();
    let entries: Vec<ManifestEntry> = Split::ALL
        .iter()
        .enumerate()
        .map(|(i, &s)| write_sample(dir.path(), &format!("v{i}"), s))
        .collect();
    let m = Manifest::new(entries, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    let back = Manifest::load(&path).unwrap();
    assert_eq!(back.entries, m.entries);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"split\": \"test_outside\""));
    for s in Split::ALL {
        assert_eq!(back.split(s).count(), 1);
    }
    let samples = back.load_split(Split::TestInside).unwrap();
    assert_eq!(samples[0].video.id, "v2");
    assert_eq!(samples[0].mask_at(0).unwrap().count(3), 1);
    assert!(samples[0].mask_at(1).is_none());
}

#[test]
fn manifest_validation() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_sample(dir.path(), "a", Split::MetaTrain);
    assert!(Manifest::new(vec![a.clone(), a.clone()], dir.path()).is_err());
    let mut bad = a.clone();
    bad.mask_frames.push(1);
    assert!(Manifest::new(vec![bad], dir.path()).is_err());

    let mut gone = a.clone();
    gone.video_path = "missing.fvid".into();
    let path = dir.path().join("m.json");
    Manifest::new(vec![gone], dir.path()).unwrap().save(&path).unwrap();
    assert!(Manifest::load(&path).unwrap_err().to_string().contains("missing"));

    std::fs::write(&path, r#"[{"id":"a","video_path":"a.fvid","mask_paths":[],"mask_frames":[],"category":"x","split":"test_inside","extra":1}]"#).unwrap();
    assert!(Manifest::load(&path).is_err());
}

proptest! {
    #[test]
    fn any_video_round_trips(t in 2usize..4, h in 1usize..6, w in 1usize..6, seed in 0u32..1000) {
        let v = video_from((t, h, w), |i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 100_000) as f32 / 7.0);
        let back = decode_video(&encode_video(&v).unwrap(), Path::new("v")).unwrap();
        prop_assert_eq!(back.raw(), v.raw());
        prop_assert_eq!(back.dims(), v.dims());
    }

    #[test]
    fn any_mask_round_trips(labels in proptest::collection::vec(0u8..4, 1..40), sx in 0.1f64..5.0) {
        let m = LabelMask::new((1, labels.len()), labels, (sx, 1.0)).unwrap();
        let back = decode_mask(&encode_mask(&m).unwrap(), Path::new("m")).unwrap();
        prop_assert!(back == m);
    }
}
