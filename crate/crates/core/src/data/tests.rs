use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codec::*;
use super::*;

fn fx(points: &[(f64, f64)]) -> FixationSet {
    FixationSet::new(
        points
            .iter()
            .map(|&(x, y)| Fixation { x, y, observer: 0 })
            .collect(),
    )
}

/// Direct double-loop oracle for the truncated-Gaussian density.
fn density_oracle(points: &[(f64, f64)], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for row in 0..height {
        for col in 0..width {
            for &(x, y) in points {
                let d_sq = (col as f64 - x).powi(2) + (row as f64 - y).powi(2);
                if d_sq <= (4.0 * sigma).powi(2) {
                    out[row * width + col] += (-d_sq / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

#[test]
fn density_single_center_fixation_peaks_there_and_sums_to_one() {
    let map = density_from_fixations(&fx(&[(5.0, 5.0)]), 11, 11, 2.0).unwrap();
    let argmax = map
        .density()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(argmax, 5 * 11 + 5);
    assert!((map.sum() - 1.0).abs() <= 1e-9);
}

#[test]
fn density_mirrored_fixations_give_symmetric_map() {
    let map = density_from_fixations(&fx(&[(3.0, 4.0), (7.0, 4.0)]), 11, 9, 1.5).unwrap();
    for row in 0..9 {
        for col in 0..11 {
            let mirrored = map.at(row, 10 - col);
            assert!((map.at(row, col) - mirrored).abs() <= 1e-9);
        }
    }
}

#[test]
fn density_matches_double_loop_oracle() {
    let pts = [(5.0, 5.0)];
    let map = density_from_fixations(&fx(&pts), 11, 11, 1.0).unwrap();
    let want = density_oracle(&pts, 11, 11, 1.0);
    for (a, b) in map.density().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn density_multi_point_matches_oracle() {
    let pts = [(2.3, 6.1), (8.9, 1.2), (4.0, 4.0)];
    let map = density_from_fixations(&fx(&pts), 12, 9, 1.7).unwrap();
    let want = density_oracle(&pts, 12, 9, 1.7);
    for (a, b) in map.density().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn density_rejects_empty_set_and_bad_sigma() {
    assert!(matches!(
        density_from_fixations(&FixationSet::default(), 8, 8, 1.0),
        Err(DataError::EmptyFixationSet)
    ));
    assert!(matches!(
        density_from_fixations(&fx(&[(1.0, 1.0)]), 8, 8, 0.0),
        Err(DataError::BadSigma(_))
    ));
}

#[test]
fn fixation_map_rounds_half_away_from_zero() {
    let map = fixation_map_from_set(&fx(&[(2.4, 3.6)]), 8, 8).unwrap();
    assert_eq!(map.count(), 1);
    assert!(map.is_hit(4, 2));
    // 0.5 rounds up, away from zero.
    let half = fixation_map_from_set(&fx(&[(1.5, 2.5)]), 8, 8).unwrap();
    assert!(half.is_hit(3, 2));
}

#[test]
fn fixation_map_collapses_duplicates() {
    let map = fixation_map_from_set(&fx(&[(2.0, 2.0), (2.0, 2.0)]), 8, 8).unwrap();
    assert_eq!(map.count(), 1);
}

#[test]
fn fixation_map_count_matches_hash_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let pts: Vec<(f64, f64)> = (0..50)
        .map(|_| (rng.gen_range(0.0..20.0), rng.gen_range(0.0..15.0)))
        .collect();
    let map = fixation_map_from_set(&fx(&pts), 20, 15).unwrap();
    let distinct: HashSet<(i64, i64)> = pts
        .iter()
        .map(|&(x, y)| {
            (
                (x.round() as i64).min(19),
                (y.round() as i64).min(14),
            )
        })
        .collect();
    assert_eq!(map.count(), distinct.len());
}

#[test]
fn resize_pad_exact_aspect_match_has_no_padding() {
    let img = ImageTensor::new(Tensor::from_fn(&[3, 576, 768], |i| {
        (i % 577) as f64 / 600.0
    }))
    .unwrap();
    let (out, rec) = resize_pad(&img, 384, 288);
    assert_eq!((out.width(), out.height()), (384, 288));
    assert_eq!((rec.scaled_w, rec.scaled_h), (384, 288));
    assert_eq!((rec.pad_left, rec.pad_top), (0, 0));
    assert!((rec.scale - 0.5).abs() < 1e-15);
}

#[test]
fn resize_pad_width_bound_pads_vertically() {
    let img = ImageTensor::new(Tensor::zeros(&[3, 100, 384])).unwrap();
    let (_, rec) = resize_pad(&img, 384, 288);
    assert!((rec.scale - 1.0).abs() < 1e-15);
    assert_eq!(rec.scaled_h, 100);
    assert_eq!(rec.pad_top, 94);
}

#[test]
fn resize_pad_roundtrip_restores_dims_and_smooth_values() {
    // Smooth horizontal+vertical gradient; bilinear round trip stays close.
    let (w, h) = (250, 166);
    let img = ImageTensor::new(Tensor::from_fn(&[3, h, w], |i| {
        let col = i % w;
        let row = (i / w) % h;
        0.5 * col as f64 / w as f64 + 0.5 * row as f64 / h as f64
    }))
    .unwrap();
    let (padded, rec) = resize_pad(&img, 384, 288);
    assert_eq!(rec.orig_w, w);
    assert_eq!(rec.orig_h, h);
    // Feed one channel back through the inverse as if it were a prediction.
    let chan = Tensor::from_fn(&[288, 384], |i| padded.tensor().data()[i]);
    let restored = unpad_resize_map(&chan, &rec);
    assert_eq!(restored.shape(), &[h, w]);
    let orig = Tensor::from_fn(&[h, w], |i| img.tensor().data()[i]);
    assert!(restored.max_abs_diff(&orig) <= 0.02);
}

#[test]
fn tsal_roundtrip_is_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = Tensor::from_fn(&[5, 7], |_| rng.gen_range(0.0..1.0));
    let mut first = Vec::new();
    write_tensor(&mut first, &t).unwrap();
    let back = read_tensor(&first[..]).unwrap();
    let mut second = Vec::new();
    write_tensor(&mut second, &back).unwrap();
    assert_eq!(first, second);
}

#[test]
fn tsal_rejects_bad_magic_version_and_truncation() {
    let t = Tensor::filled(&[2, 2], 0.5);
    let mut buf = Vec::new();
    write_tensor(&mut buf, &t).unwrap();

    let mut bad_magic = buf.clone();
    bad_magic[..4].copy_from_slice(b"XXXX");
    assert!(matches!(
        read_tensor(&bad_magic[..]),
        Err(DataError::BadMagic { found }) if &found == b"XXXX"
    ));

    let mut bad_version = buf.clone();
    bad_version[4] = 9;
    assert!(matches!(
        read_tensor(&bad_version[..]),
        Err(DataError::UnsupportedVersion(9))
    ));

    let truncated = &buf[..buf.len() - 3];
    assert!(matches!(
        read_tensor(truncated),
        Err(DataError::Truncated { .. })
    ));
}

#[test]
fn tsal_rejects_nan_payload() {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"TSAL");
    buf.push(1);
    buf.push(1);
    buf.extend_from_slice(&2u32.to_le_bytes());
    buf.extend_from_slice(&f32::NAN.to_le_bytes());
    buf.extend_from_slice(&1.0f32.to_le_bytes());
    assert!(matches!(
        read_tensor(&buf[..]),
        Err(DataError::NonFinitePayload)
    ));
}

#[test]
fn fixation_csv_header_only_is_empty_set() {
    let set = read_fixation_csv("x,y,observer\n".as_bytes()).unwrap();
    assert!(set.is_empty());
}

#[test]
fn fixation_csv_roundtrip() {
    let set = FixationSet::new(vec![
        Fixation {
            x: 2.4,
            y: 3.6,
            observer: 1,
        },
        Fixation {
            x: 10.0,
            y: 0.5,
            observer: 2,
        },
    ]);
    let mut buf = Vec::new();
    write_fixation_csv(&mut buf, &set).unwrap();
    assert!(buf.starts_with(b"x,y,observer\n"));
    assert!(!buf.contains(&b'\r'));
    let back = read_fixation_csv(&buf[..]).unwrap();
    assert_eq!(back.points, set.points);
}

#[test]
fn fixation_csv_rejects_bad_header_and_rows() {
    assert!(matches!(
        read_fixation_csv("col_a,col_b\n".as_bytes()),
        Err(DataError::BadHeader { .. })
    ));
    assert!(matches!(
        read_fixation_csv("x,y,observer\n1.0,oops,0\n".as_bytes()),
        Err(DataError::BadFixationRow { line: 2, .. })
    ));
}

#[test]
fn ppm_roundtrip_and_pgm_export() {
    let img = ImageTensor::new(Tensor::from_fn(&[3, 4, 5], |i| (i % 17) as f64 / 16.0)).unwrap();
    let mut buf = Vec::new();
    write_ppm(&mut buf, &img).unwrap();
    let back = read_ppm(&buf).unwrap();
    assert_eq!((back.width(), back.height()), (5, 4));
    // 8-bit quantization bounds the round-trip error.
    assert!(back.tensor().max_abs_diff(img.tensor()) <= 0.5 / 255.0 + 1e-12);

    let map = SaliencyMap::new(3, 2, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    let mut pgm = Vec::new();
    write_pgm(&mut pgm, &map).unwrap();
    assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(pgm[pgm.len() - 1], 255); // max pixel maps to 255
}

#[test]
fn ppm_accepts_comments_and_rejects_garbage() {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"P6\n# a comment\n2 1\n255\n");
    buf.extend_from_slice(&[0, 128, 255, 10, 20, 30]);
    let img = read_ppm(&buf).unwrap();
    assert_eq!((img.width(), img.height()), (2, 1));
    assert!(read_ppm(b"P7\n1 1\n255\nxxx").is_err());
}

#[test]
fn saliency_map_from_tensor_rejects_negative_and_fixmap_rejects_fractional() {
    let neg = Tensor::new(&[2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    assert!(matches!(
        SaliencyMap::from_tensor(&neg),
        Err(DataError::NegativeDensity)
    ));
    let frac = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.5, 0.0]).unwrap();
    assert!(matches!(
        FixationMap::from_tensor(&frac),
        Err(DataError::NotBinary(_))
    ));
}

mod properties {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as RandRng;

    fn arb_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((0.0f64..12.0, 0.0f64..10.0), 1..12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn density_always_sums_to_one(pts in arb_points(), sigma in 0.5f64..3.0) {
            let map = density_from_fixations(&fx(&pts), 12, 10, sigma).unwrap();
            prop_assert!((map.sum() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn density_is_permutation_invariant(pts in arb_points(), seed in 0u64..100) {
            let mut shuffled = pts.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, RandRng::gen_range(&mut rng, 0..=i));
            }
            let a = density_from_fixations(&fx(&pts), 12, 10, 1.3).unwrap();
            let b = density_from_fixations(&fx(&shuffled), 12, 10, 1.3).unwrap();
            for (x, y) in a.density().iter().zip(b.density()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn fixation_map_popcount_bounded(pts in arb_points()) {
            let map = fixation_map_from_set(&fx(&pts), 12, 10).unwrap();
            prop_assert!(map.count() <= pts.len());
            prop_assert!(map.count() >= 1);
        }

        #[test]
        fn resize_pad_roundtrips_dimensions(w in 8usize..200, h in 8usize..200) {
            let img = ImageTensor::new(Tensor::zeros(&[3, h, w])).unwrap();
            let (padded, rec) = resize_pad(&img, 96, 64);
            prop_assert_eq!((padded.width(), padded.height()), (96, 64));
            prop_assert!(rec.scaled_w == 96 || rec.scaled_h == 64);
            let chan = Tensor::zeros(&[64, 96]);
            let restored = unpad_resize_map(&chan, &rec);
            prop_assert_eq!(restored.shape(), &[h, w]);
        }
    }
}
