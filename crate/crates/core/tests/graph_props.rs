use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokerig_core::json::{self, Mode};
use strokerig_core::stroke::{drop_joints_indexed, simulate_stroke, StrokeSimConfig};
use strokerig_core::validate::{validate, validate_stroke};
use strokerig_core::{Category, SkeletonGraph, StrokeGraph2D, View};

fn tree(max: usize) -> impl Strategy<Value = SkeletonGraph> {
    (1..=max).prop_flat_map(|n| {
        let joints = prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), n);
        let parents = (1..n).map(|i| 0..i).collect::<Vec<_>>();
        (joints, parents).prop_map(|(j, p)| {
            let edges: Vec<(usize, usize)> = p.iter().enumerate().map(|(i, &pa)| (pa, i + 1)).collect();
            SkeletonGraph::new(j, edges).unwrap()
        })
    })
}

fn decorated(max: usize) -> impl Strategy<Value = SkeletonGraph> {
    (tree(max), any::<bool>(), prop::sample::select(vec!["character", "animal", "plant", "robot"])).prop_map(
        |(g, named, cat)| {
            let n = g.len();
            let g = g.with_category(cat.parse::<Category>().unwrap()).with_root(n - 1);
            if named {
                g.with_names((0..n).map(|i| format!("joint_{i}")).collect())
            } else {
                g
            }
        },
    )
}

fn bbox(g: &SkeletonGraph) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &g.joints {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

proptest! {
    #[test]
    fn skeleton_json_round_trips(g in decorated(30)) {
        let text = json::skeleton_to_string(&g);
        let back = json::skeleton_from_str(&text, Mode::Strict).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(json::skeleton_to_string(&back), text);
    }

    #[test]
    fn stroke_json_round_trips(g in tree(30), view in prop::sample::select(vec![View::Front, View::Side, View::Top])) {
        let mut s = g.project(view).unwrap();
        s.text = Some("a fox".into());
        let back = json::stroke_from_str(&json::stroke_to_string(&s), Mode::Strict).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn normalization_contract(g in tree(30)) {
        let n = g.normalize().unwrap();
        let (lo, hi) = bbox(&n);
        let longest = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        if g.len() > 1 && longest > 0.0 {
            prop_assert!((longest - 2.0).abs() < 1e-12);
        }
        for k in 0..3 {
            prop_assert!((lo[k] + hi[k]).abs() < 1e-12);
        }
        prop_assert!(validate(&n).is_valid());
        let twice = n.normalize().unwrap();
        for (a, b) in twice.joints.iter().zip(&n.joints) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projections_keep_the_right_axes(g in tree(12)) {
        let f = g.project(View::Front).unwrap();
        let t = g.project(View::Top).unwrap();
        let s = g.project(View::Side).unwrap();
        for (i, p) in g.joints.iter().enumerate() {
            prop_assert_eq!(f.joints2d[i], [p[0], p[1]]);
            prop_assert_eq!(t.joints2d[i], [p[0], p[2]]);
            prop_assert_eq!(s.joints2d[i], [p[2], p[1]]);
        }
        prop_assert_eq!(&f.edges, &g.edges);
    }

    #[test]
    fn simulated_strokes_keep_topology(g in tree(20), seed in any::<u64>()) {
        let s = simulate_stroke(&g.normalize().unwrap(), &mut ChaCha8Rng::seed_from_u64(seed), &StrokeSimConfig::default());
        prop_assert_eq!(&s.edges, &g.edges);
        prop_assert!(s.view.is_some());
        prop_assert!(validate_stroke(&s).is_valid());
    }

    #[test]
    fn dropped_strokes_stay_valid(g in tree(20), k in 0usize..6, seed in any::<u64>()) {
        prop_assume!(k < g.len());
        let stroke = g.project(View::Front).unwrap();
        let (out, kept) = drop_joints_indexed(&stroke, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(validate_stroke(&out).is_valid());
        prop_assert!(out.len() <= g.len() - k);
        prop_assert_eq!(kept.len(), out.len());
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        for (i, &orig) in kept.iter().enumerate() {
            prop_assert_eq!(out.joints2d[i], stroke.joints2d[orig]);
        }
    }
}

#[test]
fn jitter_moments_match_config() {
    let g = SkeletonGraph::new(vec![[0.3, -0.2, 0.1]], []).unwrap();
    let cfg = StrokeSimConfig { view_probs: [1.0, 0.0, 0.0], jitter_sigma: 0.05, max_rotation_deg: 0.0, scale_range: [1.0, 1.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let s: StrokeGraph2D = simulate_stroke(&g, &mut rng, &cfg);
        let d = s.joints2d[0][0] - 0.3;
        sum += d;
        sq += d * d;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    // Mean within 4 standard errors; variance within 5%.
    assert!(mean.abs() < 4.0 * 0.05 / (n as f64).sqrt(), "mean {mean}");
    assert!((var / 0.0025 - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn view_frequencies_follow_config() {
    let g = SkeletonGraph::new(vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [(0, 1)]).unwrap();
    let cfg = StrokeSimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let front = (0..n).filter(|_| simulate_stroke(&g, &mut rng, &cfg).view == Some(View::Front)).count();
    let p = front as f64 / n as f64;
    assert!((p - 0.6).abs() < 4.0 * (0.24f64 / n as f64).sqrt(), "front share {p}");
}
