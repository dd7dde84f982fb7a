//! Analytic gradients of the MIL losses, the balanced pixel loss and the
//! network against central finite differences in f64.

use milboundary::imaging::{BoundaryLabelMap, MultiScoreMap, ScoreMap};
use milboundary::mil::{bag_scores, loss_ag, loss_aw, total_loss};
use milboundary::net::{ModelParams, NetConfig};
use milboundary::seeds::{ConfidentLabelMap, PixelState};
use milboundary::segments::{build_segment_sets, SegmentConfig, SegmentSets};
use milboundary::student::{balanced_bce, PixelLossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 3;
const EPS: f64 = 1e-7;

fn random_labels(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ConfidentLabelMap {
    // Blocky regions so that both positive and negative bags appear.
    let cells: Vec<PixelState> = (0..9)
        .map(|_| match rng.gen_range(0..6) {
            0 | 1 => PixelState::Background,
            2 => PixelState::Ignore,
            k => PixelState::Class((k - 3) as u8),
        })
        .collect();
    let states = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if rng.gen_bool(0.1) {
                PixelState::Ignore
            } else {
                cells[(y * 3 / h) * 3 + x * 3 / w]
            }
        })
        .collect();
    ConfidentLabelMap::from_states(w, h, states).unwrap()
}

fn random_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.02..0.98)).collect()
}

/// Pixels that are within `gap` of their bag's maximum together with another
/// pixel of the same bag. Derivatives there are not defined.
fn near_ties(plane: &[f64], sets: &SegmentSets, gap: f64) -> Vec<bool> {
    let mut tied = vec![false; plane.len()];
    for i in 0..sets.len() {
        let max = sets.pixel_indices(i).map(|p| plane[p]).fold(f64::MIN, f64::max);
        let close: Vec<usize> = sets.pixel_indices(i).filter(|&p| plane[p] > max - gap).collect();
        if close.len() > 1 {
            close.into_iter().for_each(|p| tied[p] = true);
        }
    }
    tied
}

/// Relative error, floored so that gradients near zero are compared in
/// absolute terms.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

struct Instance {
    sets: SegmentSets,
    ag: ScoreMap<f64>,
    aw: MultiScoreMap<f64>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.gen_range(6..12), rng.gen_range(6..12));
    let labels = random_labels(&mut rng, w, h);
    let gamma = rng.gen_range(2.5..4.5);
    let sets = build_segment_sets(&labels, CLASSES, &SegmentConfig::with_gamma(gamma)).unwrap();
    let ag = ScoreMap::from_vec(w, h, random_plane(&mut rng, w * h)).unwrap();
    let aw = MultiScoreMap::from_vec(w, h, CLASSES, random_plane(&mut rng, CLASSES * w * h)).unwrap();
    Instance { sets, ag, aw }
}

const H: f64 = 1e-6;
const TIE_GAP: f64 = 1e-5;

#[test]
fn class_agnostic_loss_matches_finite_differences() {
    let mut checked = 0;
    for seed in 0..60 {
        let inst = instance(seed);
        if inst.sets.is_empty() {
            continue;
        }
        let l = loss_ag(&inst.ag, &inst.sets, EPS).unwrap();
        let tied = near_ties(inst.ag.as_slice(), &inst.sets, TIE_GAP);
        for p in 0..inst.ag.len() {
            if tied[p] {
                continue;
            }
            let f = |d: f64| {
                let mut m = inst.ag.clone();
                m.as_mut_slice()[p] += d;
                loss_ag(&m, &inst.sets, EPS).unwrap().value
            };
            let fd = (f(H) - f(-H)) / (2.0 * H);
            let g = l.grad.as_slice()[p];
            assert!(rel_err(fd, g) < 1e-4, "seed {seed} pixel {p}: fd {fd} vs {g}");
        }
        checked += 1;
    }
    assert!(checked >= 50);
}

#[test]
fn class_aware_loss_matches_finite_differences() {
    let mut checked = 0;
    for seed in 100..160 {
        let inst = instance(seed);
        if inst.sets.is_empty() {
            continue;
        }
        let l = loss_aw(&inst.aw, &inst.sets, EPS).unwrap();
        let n = inst.aw.plane_len();
        for c in 0..CLASSES {
            let tied = near_ties(inst.aw.channel(c), &inst.sets, TIE_GAP);
            for p in 0..n {
                if tied[p] {
                    continue;
                }
                let f = |d: f64| {
                    let mut m = inst.aw.clone();
                    m.channel_mut(c)[p] += d;
                    loss_aw(&m, &inst.sets, EPS).unwrap().value
                };
                let fd = (f(H) - f(-H)) / (2.0 * H);
                let g = l.grad.channel(c)[p];
                assert!(rel_err(fd, g) < 1e-4, "seed {seed} class {c} pixel {p}: fd {fd} vs {g}");
            }
        }
        checked += 1;
    }
    assert!(checked >= 50);
}

#[test]
fn combined_loss_matches_finite_differences() {
    let lambda = 0.25;
    let mut checked = 0;
    for seed in 200..260 {
        let inst = instance(seed);
        if inst.sets.is_empty() {
            continue;
        }
        let l = total_loss(&inst.ag, &inst.aw, &inst.sets, lambda, EPS).unwrap();
        assert!((l.total - (l.l_aw + lambda * l.l_ag)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tied_ag = near_ties(inst.ag.as_slice(), &inst.sets, TIE_GAP);
        for _ in 0..20 {
            let p = rng.gen_range(0..inst.ag.len());
            if !tied_ag[p] {
                let f = |d: f64| {
                    let mut m = inst.ag.clone();
                    m.as_mut_slice()[p] += d;
                    total_loss(&m, &inst.aw, &inst.sets, lambda, EPS).unwrap().total
                };
                let fd = (f(H) - f(-H)) / (2.0 * H);
                assert!(rel_err(fd, l.grad_ag.as_slice()[p]) < 1e-4, "seed {seed} ag pixel {p}");
            }
            let c = rng.gen_range(0..CLASSES);
            if !near_ties(inst.aw.channel(c), &inst.sets, TIE_GAP)[p] {
                let f = |d: f64| {
                    let mut m = inst.aw.clone();
                    m.channel_mut(c)[p] += d;
                    total_loss(&inst.ag, &m, &inst.sets, lambda, EPS).unwrap().total
                };
                let fd = (f(H) - f(-H)) / (2.0 * H);
                assert!(rel_err(fd, l.grad_aw.channel(c)[p]) < 1e-4, "seed {seed} aw {c} pixel {p}");
            }
        }
        checked += 1;
    }
    assert!(checked >= 50);
}

#[test]
fn gradient_is_supported_on_bag_argmaxes() {
    for seed in 300..350 {
        let inst = instance(seed);
        let l = total_loss(&inst.ag, &inst.aw, &inst.sets, 0.25, EPS).unwrap();
        let mut hit = vec![false; inst.ag.len()];
        bag_scores(inst.ag.as_slice(), &inst.sets).iter().for_each(|b| hit[b.argmax] = true);
        for (p, &g) in l.grad_ag.as_slice().iter().enumerate() {
            assert!(g == 0.0 || hit[p], "seed {seed}: gradient off the argmax set at {p}");
        }
        for c in 0..CLASSES {
            let mut hit = vec![false; inst.ag.len()];
            bag_scores(inst.aw.channel(c), &inst.sets).iter().for_each(|b| hit[b.argmax] = true);
            for (p, &g) in l.grad_aw.channel(c).iter().enumerate() {
                assert!(g == 0.0 || hit[p], "seed {seed} class {c}: gradient off the argmax set at {p}");
            }
        }
    }
}

#[test]
fn duplicating_every_bag_changes_nothing() {
    for seed in 400..430 {
        let inst = instance(seed);
        if inst.sets.is_empty() {
            continue;
        }
        let segs: Vec<_> = (0..inst.sets.len()).map(|i| inst.sets.segment(i)).collect();
        let doubled: Vec<_> = segs.iter().chain(segs.iter()).cloned().collect();
        let twice = SegmentSets::from_segments(inst.ag.width(), inst.ag.height(), CLASSES, &doubled).unwrap();
        let a = total_loss(&inst.ag, &inst.aw, &inst.sets, 0.25, EPS).unwrap();
        let b = total_loss(&inst.ag, &inst.aw, &twice, 0.25, EPS).unwrap();
        assert!((a.total - b.total).abs() < 1e-12 * a.total.abs().max(1.0));
        for (x, y) in a.grad_aw.as_slice().iter().zip(b.grad_aw.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.grad_ag.as_slice().iter().zip(b.grad_ag.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn class_channels_do_not_interact() {
    for seed in 500..530 {
        let inst = instance(seed);
        let a = loss_aw(&inst.aw, &inst.sets, EPS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut other = inst.aw.clone();
        for v in other.channel_mut(2) {
            *v = rng.gen_range(0.02..0.98);
        }
        let b = loss_aw(&other, &inst.sets, EPS).unwrap();
        for c in 0..2 {
            assert_eq!(a.grad.channel(c), b.grad.channel(c), "seed {seed} class {c}");
        }
    }
}

#[test]
fn balanced_pixel_loss_matches_finite_differences() {
    let cfg = PixelLossConfig::default();
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(3..9), rng.gen_range(3..9));
        let pred = MultiScoreMap::from_vec(w, h, CLASSES, random_plane(&mut rng, CLASSES * w * h)).unwrap();
        let rate = rng.gen_range(0.0..0.5);
        let bits = (0..CLASSES * w * h).map(|_| rng.gen_bool(rate)).collect();
        let target = BoundaryLabelMap::from_bits(w, h, CLASSES, bits).unwrap();
        let (_, grad) = balanced_bce(&pred, &target, &cfg).unwrap();
        for i in 0..pred.as_slice().len() {
            let f = |d: f64| {
                let mut m = pred.clone();
                m.as_mut_slice()[i] += d;
                balanced_bce(&m, &target, &cfg).unwrap().0
            };
            let fd = (f(H) - f(-H)) / (2.0 * H);
            let g = grad.as_slice()[i];
            assert!(rel_err(fd, g) < 1e-4, "seed {seed} index {i}: fd {fd} vs {g}");
        }
    }
}

#[test]
fn network_gradients_of_mil_loss_match_finite_differences() {
    let cfg = NetConfig {
        input_width: 16,
        input_height: 16,
        stage_channels: [4, 5, 6, 6],
        proj_width: 2,
        fuse_width: 3,
        num_classes: CLASSES,
        ..NetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = ModelParams::<f32>::init(&cfg, 5).unwrap().cast::<f64>();
    let image = MultiScoreMap::from_vec(16, 16, 3, (0..3 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let labels = random_labels(&mut rng, 16, 16);
    let sets = build_segment_sets(&labels, CLASSES, &SegmentConfig::with_gamma(4.0)).unwrap();
    let lambda = 0.25;
    let loss = |p: &ModelParams<f64>| {
        let o = p.forward(&image).unwrap();
        total_loss(&o.b_ag, &o.b_aw, &sets, lambda, EPS).unwrap().total
    };
    let (out, cache) = params.forward_cached(&image).unwrap();
    let l = total_loss(&out.b_ag, &out.b_aw, &sets, lambda, EPS).unwrap();
    let grads = params.backward(&cache, Some(&l.grad_ag), Some(&l.grad_aw)).unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for t in 0..params.tensor_count() {
        let g = grads.tensors[t].as_ref().unwrap();
        for _ in 0..6 {
            let j = rng.gen_range(0..g.len());
            let mut p = params.clone();
            p.tensor_mut(t)[j] += h;
            let up = loss(&p);
            p.tensor_mut(t)[j] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-5);
            assert!(err < 1e-3, "{}[{j}]: fd {fd} vs {}", params.tensor_name(t), g[j]);
            checked += 1;
        }
    }
    assert!(checked >= 100);
}
