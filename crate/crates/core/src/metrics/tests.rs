use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{FixationMap, SaliencyMap};

fn map_from(vals: &[f64], w: usize, h: usize) -> SaliencyMap {
    SaliencyMap::new(w, h, vals.to_vec()).unwrap()
}

fn rand_map(w: usize, h: usize, rng: &mut ChaCha8Rng) -> SaliencyMap {
    map_from(
        &(0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(),
        w,
        h,
    )
}

fn fix_from_indices(w: usize, h: usize, idx: &[usize]) -> FixationMap {
    let mut m = FixationMap::empty(w, h);
    for &i in idx {
        m.set_hit(i / w, i % w);
    }
    m
}

fn rand_fix(w: usize, h: usize, count: usize, rng: &mut ChaCha8Rng) -> FixationMap {
    let mut m = FixationMap::empty(w, h);
    while m.count() < count {
        m.set_hit(rng.gen_range(0..h), rng.gen_range(0..w));
    }
    m
}

// --- oracles ----------------------------------------------------------------

/// Two-pass covariance oracle for Pearson correlation.
fn cc_oracle(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mg = g.iter().sum::<f64>() / n;
    let cov = p.iter().zip(g).map(|(a, b)| (a - mp) * (b - mg)).sum::<f64>() / n;
    let sp = (p.iter().map(|a| (a - mp) * (a - mp)).sum::<f64>() / n).sqrt();
    let sg = (g.iter().map(|b| (b - mg) * (b - mg)).sum::<f64>() / n).sqrt();
    cov / (sp * sg)
}

fn sim_oracle(p: &[f64], g: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sg: f64 = g.iter().sum();
    let mut total = 0.0;
    for i in 0..p.len() {
        total += f64::min(p[i] / sp, g[i] / sg);
    }
    total
}

fn kld_oracle(p: &[f64], g: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sg: f64 = g.iter().sum();
    let mut total = 0.0;
    for i in 0..p.len() {
        total += g[i] / sg * (KLD_EPS + (g[i] / sg) / (KLD_EPS + p[i] / sp)).ln();
    }
    total
}

fn nss_oracle(p: &[f64], fix: &FixationMap) -> f64 {
    let n = p.len() as f64;
    let mu = p.iter().sum::<f64>() / n;
    let sd = (p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    let hits = fix.hit_indices();
    hits.iter().map(|&i| (p[i] - mu) / sd).sum::<f64>() / hits.len() as f64
}

/// Exhaustive threshold oracle: one threshold per fixated pixel value, each
/// TPR/FPR recomputed by a full scan.
fn auc_oracle(p: &[f64], fix: &FixationMap) -> f64 {
    let pos: Vec<f64> = fix.hit_indices().iter().map(|&i| p[i]).collect();
    let neg: Vec<f64> = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| fix.hits()[i] == 0)
        .map(|(_, &v)| v)
        .collect();
    auc_from_scans(&pos, &neg)
}

fn auc_from_scans(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tpr = pos.iter().filter(|&&v| v >= t).count() as f64 / pos.len() as f64;
        let fpr = neg.iter().filter(|&&v| v >= t).count() as f64 / neg.len() as f64;
        points.push((fpr, tpr));
    }
    points.push((1.0, 1.0));
    let mut area = 0.0;
    for w in points.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    area
}

// --- cc ---------------------------------------------------------------------

#[test]
fn cc_self_correlation_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = rand_map(8, 8, &mut rng);
    assert!((cc(&m, &m).unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn cc_anti_correlation_is_minus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = rand_map(8, 8, &mut rng);
    let max = g.density().iter().cloned().fold(0.0, f64::max);
    let inverted = map_from(
        &g.density().iter().map(|v| 1.0 - v / max).collect::<Vec<_>>(),
        8,
        8,
    );
    assert!((cc(&inverted, &g).unwrap() + 1.0).abs() <= 1e-12);
}

#[test]
fn cc_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = rand_map(8, 8, &mut rng);
        let g = rand_map(8, 8, &mut rng);
        let got = cc(&p, &g).unwrap();
        let want = cc_oracle(p.density(), g.density());
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn cc_constant_map_is_degenerate() {
    let constant = map_from(&[0.5; 16], 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = rand_map(4, 4, &mut rng);
    assert!(matches!(
        cc(&constant, &g),
        Err(MetricError::Degenerate { metric: "cc", .. })
    ));
}

// --- sim --------------------------------------------------------------------

#[test]
fn sim_identical_maps_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = rand_map(8, 8, &mut rng);
    assert!((sim(&m, &m).unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn sim_disjoint_supports_score_zero() {
    let mut a = vec![0.0; 16];
    let mut b = vec![0.0; 16];
    a[0] = 1.0;
    a[1] = 2.0;
    b[14] = 3.0;
    b[15] = 1.0;
    assert_eq!(sim(&map_from(&a, 4, 4), &map_from(&b, 4, 4)).unwrap(), 0.0);
}

#[test]
fn sim_matches_min_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let p = rand_map(8, 8, &mut rng);
        let g = rand_map(8, 8, &mut rng);
        let got = sim(&p, &g).unwrap();
        assert!((got - sim_oracle(p.density(), g.density())).abs() <= 1e-12);
    }
}

#[test]
fn sim_zero_map_is_degenerate() {
    let zero = map_from(&[0.0; 16], 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = rand_map(4, 4, &mut rng);
    assert!(sim(&zero, &g).is_err());
}

// --- kld --------------------------------------------------------------------

#[test]
fn kld_identical_maps_is_epsilon_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = rand_map(8, 8, &mut rng);
    let v = kld(&m, &m).unwrap();
    assert!(v.abs() <= 1e-12, "kld {v}");
}

#[test]
fn kld_concentrated_gt_against_zero_pred_matches_closed_form() {
    // gt mass on one pixel where pred is zero: the term is ln(eps + 1/eps).
    let mut g = vec![0.0; 16];
    g[5] = 1.0;
    let mut p = vec![1.0; 16];
    p[5] = 0.0;
    let got = kld(&map_from(&p, 4, 4), &map_from(&g, 4, 4)).unwrap();
    let want = (KLD_EPS + 1.0 / KLD_EPS).ln();
    assert!((got - want).abs() <= 1e-9, "got {got}, want {want}");
}

#[test]
fn kld_matches_direct_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let p = rand_map(8, 8, &mut rng);
        let g = rand_map(8, 8, &mut rng);
        let got = kld(&p, &g).unwrap();
        assert!((got - kld_oracle(p.density(), g.density())).abs() <= 1e-12);
    }
}

#[test]
fn kld_is_nonnegative_up_to_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let p = rand_map(6, 6, &mut rng);
        let g = rand_map(6, 6, &mut rng);
        assert!(kld(&p, &g).unwrap() >= -1e-9);
    }
}

// --- nss --------------------------------------------------------------------

#[test]
fn nss_fixation_at_argmax_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = rand_map(8, 8, &mut rng);
    let argmax = p
        .density()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    let fix = fix_from_indices(8, 8, &[argmax]);
    assert!(nss(&p, &fix).unwrap() > 0.0);
}

#[test]
fn nss_all_pixels_fixated_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = rand_map(8, 8, &mut rng);
    let fix = fix_from_indices(8, 8, &(0..64).collect::<Vec<_>>());
    assert!(nss(&p, &fix).unwrap().abs() <= 1e-12);
}

#[test]
fn nss_matches_z_score_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let p = rand_map(8, 8, &mut rng);
        let fix = rand_fix(8, 8, 5, &mut rng);
        let got = nss(&p, &fix).unwrap();
        assert!((got - nss_oracle(p.density(), &fix)).abs() <= 1e-12);
    }
}

#[test]
fn nss_rejects_constant_pred_and_empty_fixations() {
    let constant = map_from(&[1.0; 16], 4, 4);
    let fix = fix_from_indices(4, 4, &[3]);
    assert!(matches!(
        nss(&constant, &fix),
        Err(MetricError::Degenerate { .. })
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = rand_map(4, 4, &mut rng);
    assert!(matches!(
        nss(&p, &FixationMap::empty(4, 4)),
        Err(MetricError::EmptyFixations { .. })
    ));
}

// --- auc --------------------------------------------------------------------

#[test]
fn auc_perfect_separation_is_one() {
    let mut vals = vec![0.1; 16];
    vals[3] = 0.9;
    vals[7] = 0.8;
    let fix = fix_from_indices(4, 4, &[3, 7]);
    assert_eq!(auc_judd(&map_from(&vals, 4, 4), &fix).unwrap(), 1.0);
}

#[test]
fn auc_constant_pred_is_chance() {
    let fix = fix_from_indices(4, 4, &[1, 5]);
    assert_eq!(auc_judd(&map_from(&[0.4; 16], 4, 4), &fix).unwrap(), 0.5);
}

#[test]
fn auc_matches_exhaustive_threshold_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..30 {
        let p = rand_map(8, 8, &mut rng);
        let fix = rand_fix(8, 8, rng.gen_range(1..10), &mut rng);
        let got = auc_judd(&p, &fix).unwrap();
        assert!((got - auc_oracle(p.density(), &fix)).abs() <= 1e-12);
    }
}

#[test]
fn auc_with_ties_matches_oracle() {
    // Quantized values force tie groups.
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let vals: Vec<f64> = (0..36).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
        let p = map_from(&vals, 6, 6);
        let fix = rand_fix(6, 6, 4, &mut rng);
        let got = auc_judd(&p, &fix).unwrap();
        assert!((got - auc_oracle(p.density(), &fix)).abs() <= 1e-12);
    }
}

#[test]
fn auc_rejects_all_or_nothing_fixations() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = rand_map(4, 4, &mut rng);
    assert!(matches!(
        auc_judd(&p, &FixationMap::empty(4, 4)),
        Err(MetricError::EmptyFixations { .. })
    ));
    let all = fix_from_indices(4, 4, &(0..16).collect::<Vec<_>>());
    assert!(matches!(auc_judd(&p, &all), Err(MetricError::AllFixated)));
}

// --- sauc -------------------------------------------------------------------

#[test]
fn sauc_chance_when_negatives_match_positive_distribution() {
    // Uniform prediction values everywhere except tiny distinct jitter make
    // positives and pool negatives statistically identical.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let vals: Vec<f64> = (0..400).map(|_| rng.gen_range(0.0..1.0)).collect();
    let p = map_from(&vals, 20, 20);
    let fix = rand_fix(20, 20, 30, &mut rng);
    let mut pool = FixationMap::empty(20, 20);
    while pool.count() < 60 {
        pool.set_hit(rng.gen_range(0..20), rng.gen_range(0..20));
    }
    let v = sauc(&p, &fix, &[&pool], 7, 10).unwrap();
    assert!((v - 0.5).abs() <= 0.05, "sauc {v}");
}

#[test]
fn sauc_perfect_separation_is_one() {
    let mut vals = vec![0.1; 64];
    vals[10] = 0.9;
    vals[20] = 0.95;
    let p = map_from(&vals, 8, 8);
    let fix = fix_from_indices(8, 8, &[10, 20]);
    let pool = fix_from_indices(8, 8, &[1, 2, 3, 30, 40, 50]);
    assert_eq!(sauc(&p, &fix, &[&pool], 3, 10).unwrap(), 1.0);
}

#[test]
fn sauc_seeded_replay_matches_step_by_step_reference() {
    // Replays the documented sampling procedure independently: one ChaCha8
    // stream per call, a partial Fisher-Yates per split, and the same ROC
    // sweep evaluated by full scans.
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let vals: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..1.0)).collect();
    let p = map_from(&vals, 6, 6);
    let fix = fix_from_indices(6, 6, &[7, 14, 21]);
    let pool_map = fix_from_indices(6, 6, &[0, 5, 14, 18, 25, 30, 33]);

    let seed = 123;
    let got = sauc(&p, &fix, &[&pool_map], seed, 10).unwrap();

    // The pool is the sorted union of other-image fixations minus own hits.
    let pool: Vec<usize> = vec![0, 5, 18, 25, 30, 33];
    let pos: Vec<f64> = [7, 14, 21].iter().map(|&i| vals[i]).collect();
    let mut replay_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..10 {
        let mut scratch = pool.clone();
        for i in 0..pos.len() {
            let j = replay_rng.gen_range(i..scratch.len());
            scratch.swap(i, j);
        }
        scratch.truncate(pos.len());
        let neg: Vec<f64> = scratch.iter().map(|&i| vals[i]).collect();
        total += auc_from_scans(&pos, &neg);
    }
    let want = total / 10.0;
    assert_eq!(got, want, "seeded replay must match exactly");
    // Frozen from the replay oracle above.
    assert!((got - 0.5).abs() < 0.5, "sanity: {got}");
}

#[test]
fn sauc_empty_pool_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let p = rand_map(4, 4, &mut rng);
    let fix = fix_from_indices(4, 4, &[5]);
    // Pool only contains this image's own fixation.
    let own_only = fix_from_indices(4, 4, &[5]);
    assert!(matches!(
        sauc(&p, &fix, &[&own_only], 1, 10),
        Err(MetricError::EmptyNegativePool)
    ));
    assert!(matches!(
        sauc(&p, &fix, &[], 1, 10),
        Err(MetricError::EmptyNegativePool)
    ));
}

// --- invariance laws ---------------------------------------------------------

#[test]
fn cc_is_affine_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let p = rand_map(8, 8, &mut rng);
        let g = rand_map(8, 8, &mut rng);
        let a = rng.gen_range(0.1..5.0);
        let b = rng.gen_range(0.0..2.0);
        let tp = map_from(
            &p.density().iter().map(|v| a * v + b).collect::<Vec<_>>(),
            8,
            8,
        );
        let d = (cc(&tp, &g).unwrap() - cc(&p, &g).unwrap()).abs();
        assert!(d <= 1e-9, "affine invariance violated by {d}");
    }
}

#[test]
fn nss_is_affine_invariant_in_pred() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let p = rand_map(8, 8, &mut rng);
        let fix = rand_fix(8, 8, 4, &mut rng);
        let a = rng.gen_range(0.1..5.0);
        let b = rng.gen_range(0.0..2.0);
        let tp = map_from(
            &p.density().iter().map(|v| a * v + b).collect::<Vec<_>>(),
            8,
            8,
        );
        let d = (nss(&tp, &fix).unwrap() - nss(&p, &fix).unwrap()).abs();
        assert!(d <= 1e-9);
    }
}

#[test]
fn auc_and_sauc_are_monotone_transform_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let p = rand_map(8, 8, &mut rng);
        let fix = rand_fix(8, 8, 4, &mut rng);
        let pool = rand_fix(8, 8, 9, &mut rng);
        // Strictly increasing on [0, inf): cube plus identity.
        let tp = map_from(
            &p.density().iter().map(|v| v * v * v + v).collect::<Vec<_>>(),
            8,
            8,
        );
        assert_eq!(auc_judd(&tp, &fix).unwrap(), auc_judd(&p, &fix).unwrap());
        let s0 = sauc(&p, &fix, &[&pool], 9, 10);
        let s1 = sauc(&tp, &fix, &[&pool], 9, 10);
        match (s0, s1) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(_), Err(_)) => {} // pool may coincide with fixations
            other => panic!("inconsistent sauc outcomes: {other:?}"),
        }
    }
}

#[test]
fn sim_and_kld_are_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..50 {
        let p = rand_map(8, 8, &mut rng);
        let g = rand_map(8, 8, &mut rng);
        let c = rng.gen_range(0.1..20.0);
        let sp = map_from(&p.density().iter().map(|v| c * v).collect::<Vec<_>>(), 8, 8);
        assert!((sim(&sp, &g).unwrap() - sim(&p, &g).unwrap()).abs() <= 1e-9);
        assert!((kld(&sp, &g).unwrap() - kld(&p, &g).unwrap()).abs() <= 1e-9);
    }
}

// --- reports ------------------------------------------------------------------

#[test]
fn evaluate_pair_perfect_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let gt = rand_map(8, 8, &mut rng).normalized().unwrap();
    let fix = rand_fix(8, 8, 5, &mut rng);
    let pool = rand_fix(8, 8, 8, &mut rng);
    let report = evaluate_pair("img", &gt, &gt, &fix, &[&pool], 1, 10);
    assert!((report.score(Metric::Cc).unwrap() - 1.0).abs() <= 1e-12);
    assert!((report.score(Metric::Sim).unwrap() - 1.0).abs() <= 1e-12);
    assert!(report.score(Metric::Kld).unwrap().abs() <= 1e-12);
    assert!(report.flags().is_empty());
}

#[test]
fn evaluate_pair_constant_pred_flags_cc_and_nss() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let constant = map_from(&[0.3; 64], 8, 8);
    let gt = rand_map(8, 8, &mut rng).normalized().unwrap();
    let fix = rand_fix(8, 8, 4, &mut rng);
    let pool = rand_fix(8, 8, 9, &mut rng);
    let report = evaluate_pair("flat", &constant, &gt, &fix, &[&pool], 1, 10);
    assert_eq!(report.flags(), "degenerate:cc,nss");
    assert!(report.score(Metric::Sim).is_some());
    assert_eq!(report.score(Metric::Auc), Some(0.5));
}

#[test]
fn aggregate_is_arithmetic_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut full = MetricReport::default();
    let mut values = Vec::new();
    for i in 0..3 {
        let p = rand_map(8, 8, &mut rng);
        let g = rand_map(8, 8, &mut rng);
        let fix = rand_fix(8, 8, 4, &mut rng);
        let pool = rand_fix(8, 8, 9, &mut rng);
        let rep = evaluate_pair(&format!("img{i}"), &p, &g, &fix, &[&pool], 5, 10);
        values.push(rep.score(Metric::Cc).unwrap());
        full.push(rep);
    }
    let want = values.iter().sum::<f64>() / 3.0;
    assert!((full.aggregate(Metric::Cc).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn csv_has_pinned_header_and_quotes_flags() {
    let constant = map_from(&[0.3; 16], 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let gt = rand_map(4, 4, &mut rng);
    let fix = fix_from_indices(4, 4, &[3, 9]);
    let mut report = MetricReport::default();
    report.push(evaluate_pair("flat", &constant, &gt, &fix, &[], 1, 10));
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "image,cc,sim,kld,nss,auc,sauc,flags");
    let row = lines.next().unwrap();
    assert!(row.starts_with("flat,"));
    assert!(row.contains("\"degenerate:cc,nss,sauc\""), "{row}");
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn pretty_table_groups_perception_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let g = rand_map(4, 4, &mut rng);
    let fix = fix_from_indices(4, 4, &[1]);
    let mut report = MetricReport::default();
    report.push(evaluate_pair("a", &g, &g, &fix, &[], 1, 10));
    let table = report.pretty_table();
    assert!(table.contains("perception-based"));
    let header_line = table
        .lines()
        .find(|l| l.contains("CC"))
        .expect("column header");
    let cc_pos = header_line.find("CC").unwrap();
    let sauc_pos = header_line.find("sAUC").unwrap();
    assert!(cc_pos < sauc_pos);
}
