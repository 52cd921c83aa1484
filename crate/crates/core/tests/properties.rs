use proptest::prelude::*;

use anneal_stein::analytic::{product_oracle_moments, GmmComponent, GmmExpert};
use anneal_stein::backend::proto::Frame;
use anneal_stein::cli_io::tensor_io::{decode, encode};
use anneal_stein::cli_io::RunConfig;
use anneal_stein::composition::{project, refine_masks, Mask, MaskKind, MaskSet, Smoothing};
use anneal_stein::extension::{extend, total_frames};
use anneal_stein::flow::{clean_prediction, velocity_from_score, AnnealLadder, NoiseSchedule, ScheduleKind, TauMapping};
use anneal_stein::svgd::svgd_directions;
use anneal_stein::{LatticeField, Shape};

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::RectifiedLinear), Just(ScheduleKind::VariancePreserving)]
}

fn mapping() -> impl Strategy<Value = TauMapping> {
    prop_oneof![Just(TauMapping::default()), Just(TauMapping::PlusOne)]
}

fn shape() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..3, 1usize..4, 1usize..3).prop_map(|(h, w, n, c)| Shape::new(h, w, n, c))
}

fn field(shape: Shape, lo: f64, hi: f64) -> impl Strategy<Value = LatticeField> {
    prop::collection::vec(lo..hi, shape.len()).prop_map(move |v| LatticeField::from_vec(shape, v).unwrap())
}

fn gmm(shape: Shape) -> impl Strategy<Value = GmmExpert> {
    prop::collection::vec((0.1f64..1.0, -2.0f64..2.0, 0.05f64..2.0), 1..4).prop_map(move |cs| {
        let total: f64 = cs.iter().map(|c| c.0).sum();
        let comps = cs
            .into_iter()
            .map(|(w, m, v)| GmmComponent {
                weight: w / total,
                mean: LatticeField::filled(shape, m),
                var: v,
            })
            .collect();
        GmmExpert::new("g", comps, None).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn schedule_is_monotone_and_bounded(k in kind(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = NoiseSchedule::new(k, 1e-3).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(s.alpha(lo) <= s.alpha(hi));
        prop_assert!(s.sigma(lo) >= s.sigma(hi));
        for t in [lo, hi] {
            prop_assert!((0.0..=1.0).contains(&s.alpha(t)) && (0.0..=1.0).contains(&s.sigma(t)));
        }
    }

    #[test]
    fn ladder_is_strictly_decreasing(steps in 1usize..300, m in mapping(), eps in 1e-4f64..0.05) {
        // a grid whose second level already reaches 1 - eps is refused
        let denom = match m { TauMapping::PlusOne => steps as f64 + 1.0, _ => steps as f64 };
        let l = match AnnealLadder::new(steps, m, eps) {
            Ok(l) => l,
            Err(_) => {
                prop_assert!(steps > 1 && (steps - 1) as f64 / denom >= 1.0 - eps);
                return Ok(());
            }
        };
        prop_assert_eq!(l.tau_of(steps), 0.0);
        prop_assert!((l.tau_of(0) - (1.0 - eps)).abs() < 1e-15);
        for t in 1..=steps {
            prop_assert!(l.tau_of(t) < l.tau_of(t - 1));
            prop_assert!(l.step(t) > 0.0);
        }
    }

    #[test]
    fn marginal_score_at_noise_end_is_standard_normal(
        (g, x) in shape().prop_flat_map(|s| (gmm(s), field(s, -3.0, 3.0))),
        k in kind(),
    ) {
        let s = NoiseSchedule::new(k, 1e-3).unwrap();
        let sc = g.marginal_score(&x, 0.0, &s).unwrap();
        for (a, b) in sc.data().iter().zip(x.data()) {
            prop_assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_prediction_is_tweedie(
        (g, x) in shape().prop_flat_map(|s| (gmm(s), field(s, -3.0, 3.0))),
        k in kind(),
        tau in 0.01f64..0.99,
    ) {
        let s = NoiseSchedule::new(k, 1e-3).unwrap();
        let sc = g.marginal_score(&x, tau, &s).unwrap();
        let v = velocity_from_score(&x, &sc, tau, &s).unwrap();
        let x0 = clean_prediction(&x, &v, tau, &s).unwrap();
        let p = s.point(tau);
        for ((xi, si), ci) in x.data().iter().zip(sc.data()).zip(x0.data()) {
            let tweedie = (xi + p.sigma * p.sigma * si) / p.alpha;
            prop_assert!((ci - tweedie).abs() <= 1e-9 * tweedie.abs().max(1.0), "{} vs {}", ci, tweedie);
        }
    }

    #[test]
    fn gaussian_product_identity(params in prop::collection::vec((-3.0f64..3.0, 0.05f64..3.0), 1..5)) {
        let sh = Shape::new(1, 1, 2, 1);
        let experts: Vec<GmmExpert> = params
            .iter()
            .map(|(m, v)| GmmExpert::isotropic("e", sh, *m, *v).unwrap())
            .collect();
        let refs: Vec<&GmmExpert> = experts.iter().collect();
        let o = product_oracle_moments(&refs).unwrap();
        let prec: f64 = params.iter().map(|(_, v)| 1.0 / v).sum();
        let mean = params.iter().map(|(m, v)| m / v).sum::<f64>() / prec;
        prop_assert!((o.var - 1.0 / prec).abs() <= 1e-12 * o.var.max(1.0));
        for v in o.mean.data() {
            prop_assert!((v - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }

    #[test]
    fn mask_identity_survives_refinement(
        (sh, fg, sim, x0, z0) in shape().prop_flat_map(|s| {
            let cells = s.cells();
            (
                Just(s),
                prop::collection::vec(0.0f64..=1.0, cells),
                prop::collection::vec(0.0f64..=1.0, cells),
                field(s, -2.0, 2.0),
                field(s, -2.0, 2.0),
            )
        }),
        smooth in any::<bool>(),
        threshold in 0.0f64..2.0,
        decay in 0.0f64..=1.0,
    ) {
        let smoothing = smooth.then_some(Smoothing { radius: 1, sigma: 0.5 });
        let mut ms = MaskSet::new(
            Mask::from_values(MaskKind::Fg, sh, fg).unwrap(),
            Mask::from_values(MaskKind::Sim, sh, sim).unwrap(),
            smoothing,
        )
        .unwrap();
        ms.check_identity(1e-12).unwrap();
        for _ in 0..3 {
            refine_masks(&x0, &z0, &mut ms, threshold, decay).unwrap();
            ms.check_identity(1e-12).unwrap();
            let expect = Mask::context_from(ms.fg(), ms.sim()).unwrap();
            for (a, b) in ms.context().values().iter().zip(expect.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn projection_is_idempotent_for_binary_masks(
        (sh, bits, x, z) in shape().prop_flat_map(|s| {
            (Just(s), prop::collection::vec(any::<bool>(), s.cells()), field(s, -5.0, 5.0), field(s, -5.0, 5.0))
        }),
    ) {
        let m = Mask::from_values(MaskKind::Context, sh, bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()).unwrap();
        let once = project(&x, &z, &m);
        let twice = project(&once, &z, &m);
        prop_assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn tensor_files_round_trip_bitwise(
        f in shape().prop_flat_map(|s| field(s, -1e6, 1e6)),
    ) {
        let first = encode(&f);
        let back = decode(&first).unwrap();
        prop_assert_eq!(back.shape(), f.shape());
        prop_assert_eq!(encode(&back), first);
    }

    #[test]
    fn arbitrary_bytes_never_panic_the_frame_decoder(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = Frame::decode(&bytes);
        let _ = decode(&bytes);
    }

    #[test]
    fn mirrored_pair_stays_mirrored(mode in -3.0f64..3.0, d in 0.01f64..2.0, var in 0.1f64..2.0, h in 0.01f64..10.0) {
        let sh = Shape::new(1, 1, 1, 1);
        let xs = vec![LatticeField::filled(sh, mode + d), LatticeField::filled(sh, mode - d)];
        let scores: Vec<LatticeField> = xs.iter().map(|x| x.map(|v| -(v - mode) / var)).collect();
        let phi = svgd_directions(&xs, &scores, h, true).unwrap();
        let a = xs[0].data()[0] + 1e-2 * phi[0].data()[0] - mode;
        let b = xs[1].data()[0] + 1e-2 * phi[1].data()[0] - mode;
        prop_assert!((a + b).abs() <= 1e-12 * (1.0 + mode.abs()), "{} {}", a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extension_length_formula(segments in 1usize..5, n in 2usize..7, k_frac in 0.0f64..1.0) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let k = k.min(n - 1);
        prop_assert_eq!(total_frames(segments, n, k), n + (segments - 1) * (n - k));
        let text = format!(
            r#"
particles = 2
[lattice]
h = 1
w = 1
n = {n}
[ladder]
steps = 2
[[experts]]
name = "a"
gmm = {{ components = [{{ mean = 0.0, var = 1.0 }}] }}
[context]
source = "direct"
reference = {{ constant = 0.0 }}
[segments]
count = {segments}
overlap = {k}
"#
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let (plan, st) = cfg.build_extension(std::path::Path::new(".")).unwrap();
        let out = extend(&plan, &st, &mut |_, _| {}).unwrap();
        prop_assert_eq!(out.sequence.shape().n, total_frames(segments, n, k));
        for s in &out.segments[1..] {
            prop_assert_eq!(s.overlap_error, Some(0.0));
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected(key in "[a-z]{3,10}") {
        let known = ["seed", "particles", "output", "lattice", "schedule", "ladder", "svgd", "experts", "masks",
            "context", "lambda_policy", "projection", "recon", "refine", "segments"];
        prop_assume!(!known.contains(&key.as_str()));
        let text = format!(
            "{key} = 1\n[lattice]\nh = 1\nw = 1\nn = 1\n[ladder]\nsteps = 2\n[[experts]]\nname = \"a\"\ngmm = {{ components = [{{ mean = 0.0, var = 1.0 }}] }}\n"
        );
        prop_assert!(RunConfig::parse(&text).is_err());
    }
}
