//! Otsu against an exhaustive search, NMS fixed-point and monotonicity
//! properties, class filtering and multi-scale/flip aggregation.

use milboundary::imaging::{resize_bilinear, resize_multi, MultiScoreMap, ScoreMap};
use milboundary::net::{combine, ModelParams, NetConfig};
use milboundary::pseudolabel::{
    filter_irrelevant_classes, msf_predict, nms_thin, otsu_candidates, otsu_threshold, pseudo_labels_from_outputs, MsfConfig, NmsConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straightforward Otsu: bin each value by counting candidate edges at or
/// below it, then scan every split with float statistics on bin centres.
fn otsu_oracle(values: &[f64]) -> f64 {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = otsu_candidates(min, max);
    let mut hist = vec![0usize; 256];
    for &v in values {
        let b = edges[1..].iter().filter(|&&t| t <= v).count();
        hist[b] += 1;
    }
    let n = values.len() as f64;
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 1..256 {
        let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for (b, &c) in hist.iter().enumerate() {
            let centre = b as f64 + 0.5;
            if b < k {
                n0 += c as f64;
                s0 += c as f64 * centre;
            } else {
                n1 += c as f64;
                s1 += c as f64 * centre;
            }
        }
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let var = (n0 / n) * (n1 / n) * (s0 / n0 - s1 / n1).powi(2);
        if var > best.0 {
            best = (var, k);
        }
    }
    edges[best.1]
}

fn random_values(rng: &mut ChaCha8Rng, case: usize) -> Vec<f64> {
    let n = rng.gen_range(2..400);
    match case % 4 {
        0 => (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect(),
        1 => (0..n)
            .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.6..0.9) } else { rng.gen_range(0.01..0.3) })
            .collect(),
        // Few distinct values, many duplicates.
        2 => (0..n).map(|_| rng.gen_range(1..8) as f64 / 8.0).collect(),
        _ => (0..n).map(|_| rng.gen::<f64>().powi(4) + 1e-6).collect(),
    }
}

#[test]
fn otsu_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut nondegenerate = 0;
    for case in 0..500 {
        let v = random_values(&mut rng, case);
        let got = otsu_threshold(&v).unwrap();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            assert!(got.degenerate && got.threshold == min);
            continue;
        }
        nondegenerate += 1;
        assert!(!got.degenerate);
        assert_eq!(got.threshold, otsu_oracle(&v), "case {case}");
        assert!(got.threshold > min && got.threshold <= max);
    }
    assert!(nondegenerate > 450);
}

fn random_map(rng: &mut ChaCha8Rng) -> ScoreMap<f32> {
    let (w, h) = (rng.gen_range(12..33), rng.gen_range(12..33));
    let ridges: Vec<(f64, f64, f64, f64, f64)> = (0..rng.gen_range(1..4))
        .map(|_| {
            let a = rng.gen_range(0.0..std::f64::consts::PI);
            (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64), a, rng.gen_range(0.6..2.5), rng.gen_range(0.3..1.0))
        })
        .collect();
    let noise = rng.gen_range(0.0..0.15);
    ScoreMap::from_fn(w, h, |x, y| {
        let s: f64 = ridges
            .iter()
            .map(|&(cx, cy, a, width, amp)| {
                let d = (x as f64 - cx) * a.sin() - (y as f64 - cy) * a.cos();
                amp * (-d * d / (2.0 * width * width)).exp()
            })
            .sum();
        let v = s + noise * rng.gen::<f64>();
        if v < 0.05 {
            0.0
        } else {
            v.min(1.0) as f32
        }
    })
}

#[test]
fn nms_is_idempotent_and_keeps_survivor_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let m = random_map(&mut rng);
        let cfg = NmsConfig {
            radius: rng.gen_range(1..11),
            multiplier: rng.gen_range(1.0..1.6),
            ..NmsConfig::default()
        };
        let once = nms_thin(&m, &cfg).unwrap();
        assert_eq!(nms_thin(&once, &cfg).unwrap(), once, "case {case}: not idempotent");
        for (&o, &s) in once.as_slice().iter().zip(m.as_slice()) {
            assert!(o == 0.0 || o == s, "case {case}: survivor score changed");
        }
    }
}

#[test]
fn thinned_maps_stay_fixed_under_larger_multipliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let m = random_map(&mut rng);
        let base = NmsConfig {
            radius: rng.gen_range(1..11),
            ..NmsConfig::default()
        };
        let thin = nms_thin(&m, &NmsConfig { multiplier: 1.0, ..base.clone() }).unwrap();
        for multiplier in [1.1, 1.25, 1.5] {
            let relaxed = NmsConfig { multiplier, ..base.clone() };
            assert_eq!(nms_thin(&thin, &relaxed).unwrap(), thin, "case {case} multiplier {multiplier}");
        }
    }
}

#[test]
fn class_filter_is_idempotent_and_commutes_with_nms() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = NmsConfig::default();
    for _ in 0..20 {
        let chans: Vec<ScoreMap<f32>> = (0..3).map(|_| random_map(&mut rng)).collect();
        let (w, h) = (chans[0].width(), chans[0].height());
        let chans: Vec<_> = chans.iter().map(|c| resize_bilinear(c, w, h).unwrap()).collect();
        let m = MultiScoreMap::from_channels(&chans).unwrap();
        let labels = [0usize, 2];
        let f = filter_irrelevant_classes(&m, &labels).unwrap();
        assert_eq!(filter_irrelevant_classes(&f, &labels).unwrap(), f);
        let thin_all = |m: &MultiScoreMap<f32>| {
            let t: Vec<_> = (0..3).map(|c| nms_thin(&m.channel_map(c), &cfg).unwrap()).collect();
            MultiScoreMap::from_channels(&t).unwrap()
        };
        assert_eq!(thin_all(&f), filter_irrelevant_classes(&thin_all(&m), &labels).unwrap());
    }
}

fn small_net() -> NetConfig {
    NetConfig {
        input_width: 24,
        input_height: 20,
        stage_channels: [4, 6, 8, 8],
        proj_width: 2,
        fuse_width: 4,
        num_classes: 3,
        ..NetConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> MultiScoreMap<f32> {
    MultiScoreMap::from_vec(w, h, 3, (0..3 * w * h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn msf_commutes_with_mirroring() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let msf = MsfConfig::default();
    for seed in 0..5 {
        let p = ModelParams::<f32>::init(&small_net(), seed).unwrap();
        let x = random_image(&mut rng, 24, 20);
        let a = msf_predict(&p, &x, &msf).unwrap();
        let b = msf_predict(&p, &x.flip_horizontal(), &msf).unwrap();
        assert_eq!(b.b_ag, a.b_ag.flip_horizontal());
        assert_eq!(b.b_aw, a.b_aw.flip_horizontal());
        assert_eq!(b.b_final, a.b_final.flip_horizontal());
    }
}

#[test]
fn msf_is_the_mean_of_its_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = ModelParams::<f32>::init(&small_net(), 9).unwrap().cast::<f64>();
    let x = random_image(&mut rng, 24, 20).cast::<f64>();
    let msf = MsfConfig {
        scales: vec![0.75, 1.0, 1.25],
        use_flip: true,
    };
    let out = msf_predict(&p, &x, &msf).unwrap();
    let mut ag = vec![0.0; 24 * 20];
    let mut aw = vec![0.0; 3 * 24 * 20];
    let mut passes = 0;
    for &s in &msf.scales {
        let (sw, sh) = ((24.0 * s).round() as usize, (20.0 * s).round() as usize);
        for flip in [false, true] {
            let input = if flip { x.flip_horizontal() } else { x.clone() };
            let o = p.forward_any(&resize_multi(&input, sw, sh).unwrap()).unwrap();
            let (mut a, mut b) = (resize_bilinear(&o.b_ag, 24, 20).unwrap(), resize_multi(&o.b_aw, 24, 20).unwrap());
            if flip {
                a = a.flip_horizontal();
                b = b.flip_horizontal();
            }
            ag.iter_mut().zip(a.as_slice()).for_each(|(s, v)| *s += v);
            aw.iter_mut().zip(b.as_slice()).for_each(|(s, v)| *s += v);
            passes += 1;
        }
    }
    assert_eq!(passes, 6);
    for (o, s) in out.b_ag.as_slice().iter().zip(&ag) {
        assert!((o - s / 6.0).abs() < 1e-12);
    }
    for (o, s) in out.b_aw.as_slice().iter().zip(&aw) {
        assert!((o - s / 6.0).abs() < 1e-12);
    }
    let expect = combine(&out.b_ag, &out.b_aw);
    assert_eq!(out.b_final, expect);
}

#[test]
fn hard_labels_lie_on_positive_soft_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let p = ModelParams::<f32>::init(&small_net(), seed).unwrap();
        let x = random_image(&mut rng, 24, 20);
        let out = msf_predict(&p, &x, &MsfConfig::default()).unwrap();
        let labels = [1usize];
        let pl = pseudo_labels_from_outputs(&out, &labels, Some(&NmsConfig::default())).unwrap();
        for c in 0..3 {
            for (i, &bit) in pl.hard.channel(c).iter().enumerate() {
                assert!(!bit || (labels.contains(&c) && pl.soft.channel(c)[i] > 0.0));
            }
        }
    }
    let zero = ModelParams::<f32>::zeros(&small_net()).unwrap();
    let mut out = zero.forward(&random_image(&mut rng, 24, 20)).unwrap();
    out.b_final.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    let pl = pseudo_labels_from_outputs(&out, &[0, 1], Some(&NmsConfig::default())).unwrap();
    assert!(pl.degenerate && pl.hard.count() == 0);
}
