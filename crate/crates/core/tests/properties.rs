use proptest::prelude::*;

use cnsn_core::agent::{random_shift, shift_with_offset, soft_update, QNet};
use cnsn_core::encoder::{sample_active_mask, EncoderConfig, NormVariant};
use cnsn_core::harness::{parse_metrics, RunRecord, Variant, HEADER};
use cnsn_core::normlayers::{
    channel_stats, crossnorm_forward, sample_crop, sample_partners, selfnorm_forward_with, CropRegion,
    CrossNormConfig, Gates, Pairing, PairingMode, SelfNormConfig, SelfNormParams,
};
use cnsn_core::numcore::conv2d;
use cnsn_core::pixelworld::{transition, Action, Env, ShiftSpec, Suite};
use cnsn_core::{Prng, Tensor};

const TIGHT: CrossNormConfig = CrossNormConfig {
    crop_enabled: false,
    crop_frac_range: [0.5, 1.0],
    eps: 1e-12,
    pairing: PairingMode::Matching,
};

fn batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Prng::new(seed);
    let styles: Vec<(f64, f64)> = (0..n * c)
        .map(|_| (rng.uniform_range(-3.0, 3.0), rng.uniform_range(0.3, 3.0)))
        .collect();
    Tensor::from_fn(&[n, c, h, w], |k| {
        let (m, s) = styles[k / (h * w)];
        m + s * rng.normal()
    })
}

fn instance(x: &Tensor<f64>, i: usize) -> &[f64] {
    let per = x.len() / x.shape()[0];
    &x.data()[i * per..(i + 1) * per]
}

fn mode() -> impl Strategy<Value = PairingMode> {
    prop_oneof![Just(PairingMode::Matching), Just(PairingMode::Permutation)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn crossnorm_output_carries_source_statistics(
        n in 1usize..7, c in 1usize..4, h in 2usize..7, w in 2usize..7, seed in any::<u64>(), m in mode()
    ) {
        let x = batch(n, c, h, w, seed);
        let pairing = sample_partners(&mut Prng::new(seed ^ 1), n, m);
        let (y, _) = crossnorm_forward(&x, &pairing, None, &TIGHT).unwrap();
        let sx = channel_stats(&x, None).unwrap();
        let sy = channel_stats(&y, None).unwrap();
        for i in 0..n {
            for ch in 0..c {
                let (mu, sigma) = sy.get(i, ch);
                let (pm, ps) = sx.get(pairing.partner(i), ch);
                prop_assert!((mu - pm).abs() < 1e-9);
                prop_assert!((sigma - ps).abs() < 1e-9 * ps.max(1.0));
            }
        }
    }

    #[test]
    fn crossnorm_commutes_with_relabeling(
        n in 2usize..7, c in 1usize..3, seed in any::<u64>(), m in mode(), crop in any::<bool>()
    ) {
        let (h, w) = (5, 4);
        let x = batch(n, c, h, w, seed);
        let mut rng = Prng::new(seed ^ 2);
        let cfg = CrossNormConfig { crop_enabled: crop, ..TIGHT };
        let pairing = sample_partners(&mut rng, n, m);
        let regions: Vec<CropRegion> = (0..n).map(|_| sample_crop(&mut rng, h, w, &cfg)).collect();
        let perm = rng.permutation(n);

        let (y, _) = crossnorm_forward(&x, &pairing, crop.then_some(&regions[..]), &cfg).unwrap();
        let xp = Tensor::from_vec(x.shape(), perm.iter().flat_map(|&p| instance(&x, p).to_vec()).collect()).unwrap();
        let rp: Vec<CropRegion> = perm.iter().map(|&p| regions[p]).collect();
        let (yp, _) = crossnorm_forward(&xp, &pairing.permuted(&perm), crop.then_some(&rp[..]), &cfg).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(instance(&yp, i), instance(&y, p));
        }
    }

    #[test]
    fn matching_crossnorm_is_an_involution(n in 2usize..7, c in 1usize..3, seed in any::<u64>()) {
        let x = batch(n, c, 4, 4, seed);
        let pairing = sample_partners(&mut Prng::new(seed ^ 3), n, PairingMode::Matching);
        prop_assert!(pairing.is_involution());
        let (y, _) = crossnorm_forward(&x, &pairing, None, &TIGHT).unwrap();
        let (z, _) = crossnorm_forward(&y, &pairing, None, &TIGHT).unwrap();
        prop_assert!(z.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn identity_pairing_leaves_input_unchanged(n in 1usize..5, seed in any::<u64>()) {
        let x = batch(n, 2, 3, 3, seed);
        let (y, _) = crossnorm_forward(&x, &Pairing::identity(n), None, &TIGHT).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn selfnorm_recalibrates_statistics(
        f in 0.01f64..0.99, g in 0.01f64..0.99, n in 1usize..4, seed in any::<u64>()
    ) {
        let x = batch(n, 3, 4, 5, seed);
        let stats = channel_stats(&x, None).unwrap();
        let (y, _) = selfnorm_forward_with(&x, &stats, Gates::Forced { f, g }).unwrap();
        let sy = channel_stats(&y, None).unwrap();
        for i in 0..n {
            for ch in 0..3 {
                let (mu, sigma) = stats.get(i, ch);
                let (ym, ys) = sy.get(i, ch);
                prop_assert!((ym - f * mu).abs() < 1e-9);
                prop_assert!((ys - g * sigma).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn selfnorm_gates_stay_in_unit_interval(
        mu in -1e4f32..1e4, sigma in 0f32..1e4, scale in 0.1f64..10.0, seed in any::<u64>()
    ) {
        let cfg = SelfNormConfig { hidden: 3, init_output_bias: 0.0, init_scale: scale };
        let p = SelfNormParams::<f32>::init(2, &cfg, &mut Prng::new(seed));
        for c in 0..2 {
            for v in [p.f.value(c, mu, sigma), p.g.value(c, mu, sigma)] {
                prop_assert!(v > 0.0 && v < 1.0, "gate {}", v);
            }
        }
    }

    #[test]
    fn channel_stats_are_affine_equivariant(a in -4.0f64..4.0, b in -4.0f64..4.0, seed in any::<u64>()) {
        prop_assume!(a.abs() > 1e-3);
        let x = batch(2, 2, 3, 4, seed);
        let y = x.map(|v| a * v + b);
        let (sx, sy) = (channel_stats(&x, None).unwrap(), channel_stats(&y, None).unwrap());
        for i in 0..2 {
            for c in 0..2 {
                let ((m, s), (ym, ys)) = (sx.get(i, c), sy.get(i, c));
                prop_assert!((ym - (a * m + b)).abs() < 1e-9);
                prop_assert!((ys - a.abs() * s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crop_windows_stay_inside_the_map(h in 1usize..20, w in 1usize..20, lo in 0.05f64..1.0, seed in any::<u64>()) {
        prop_assume!(h * w >= 2);
        let cfg = CrossNormConfig { crop_frac_range: [lo, 1.0], ..Default::default() };
        let r = sample_crop(&mut Prng::new(seed), h, w, &cfg);
        prop_assert!(r.top + r.height <= h && r.left + r.width <= w);
        prop_assert!(r.validate(h, w).is_ok());
        prop_assert!(r.height >= ((lo * h as f64).ceil() as usize).min(2.min(h)));
    }

    #[test]
    fn active_mask_has_exactly_k_layers(layers in 1usize..12, k in 0usize..12, seed in any::<u64>()) {
        let mut cfg = EncoderConfig::default();
        let spec = cfg.layers[3];
        cfg.layers = vec![spec; layers];
        cfg.norms = vec![NormVariant::Cnsn; layers];
        cfg.k_active = k.min(layers);
        let m = sample_active_mask(&mut Prng::new(seed), &cfg);
        prop_assert_eq!(m.0.len(), layers);
        prop_assert_eq!(m.count(), k.min(layers));
    }

    #[test]
    fn conv_is_linear_in_its_input(a in -3.0f64..3.0, seed in any::<u64>(), stride in 1usize..3) {
        let mut rng = Prng::new(seed);
        let mut draw = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.normal());
        let (x1, x2, w) = (draw(&[2, 3, 6, 5]), draw(&[2, 3, 6, 5]), draw(&[4, 3, 3, 3]));
        let b = Tensor::zeros(&[4]);
        let mut mix = x1.map(|v| a * v);
        mix.add_assign(&x2);
        let lhs = conv2d(&mix, &w, &b, stride, 1).unwrap();
        let mut rhs = conv2d(&x1, &w, &b, stride, 1).unwrap().map(|v| a * v);
        rhs.add_assign(&conv2d(&x2, &w, &b, stride, 1).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn shifts_only_move_pixels(pad in 0usize..4, dy in 0usize..9, dx in 0usize..9, seed in any::<u64>()) {
        let (dy, dx) = (dy.min(2 * pad), dx.min(2 * pad));
        let x = batch(1, 2, 8, 8, seed);
        let mut out = vec![0.0; x.len()];
        shift_with_offset(&x, 0, pad, dy, dx, &mut out);
        for ch in 0..2 {
            let plane = &x.data()[ch * 64..(ch + 1) * 64];
            for y in 0..8 {
                for xx in 0..8 {
                    let sy = (y + dy).saturating_sub(pad).min(7);
                    let sx = (xx + dx).saturating_sub(pad).min(7);
                    prop_assert_eq!(out[ch * 64 + y * 8 + xx], plane[sy * 8 + sx]);
                }
            }
        }
        if pad == 0 {
            prop_assert_eq!(random_shift(&x, 0, &mut Prng::new(seed)).unwrap(), x);
        }
    }

    #[test]
    fn soft_update_is_a_convex_combination(tau in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut cfg = EncoderConfig::default().with_norm(NormVariant::SnOnly);
        cfg.layers.truncate(1);
        cfg.layers[0].out_channels = 2;
        cfg.norms.truncate(1);
        cfg.feature_dim = 4;
        let online = QNet::<f64>::new(&cfg, &mut Prng::new(seed)).unwrap();
        let old = QNet::<f64>::new(&cfg, &mut Prng::new(seed ^ 9)).unwrap();
        let mut target = old.clone();
        soft_update(&mut target, &online, tau);
        for (((_, t), (_, o)), (_, s)) in target.param_tensors().iter().zip(online.param_tensors()).zip(old.param_tensors()) {
            for ((&t, &o), &s) in t.data().iter().zip(o.data()).zip(s.data()) {
                prop_assert!((t - ((1.0 - tau) * s + tau * o)).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Dynamics and rewards never depend on the rendering suite.
    #[test]
    fn suites_share_the_task(seed in any::<u64>(), actions in proptest::collection::vec(0usize..5, 1..60)) {
        let episode = Prng::new(seed);
        let (train, _) = Env::reset(&ShiftSpec::suite(Suite::Train), &episode);
        for suite in Suite::ALL {
            let (mut env, _) = Env::reset(&ShiftSpec::suite(suite), &episode);
            prop_assert_eq!(env.state(), train.state());
            let mut state = *train.state();
            for &a in &actions {
                if env.is_done() {
                    break;
                }
                let action = Action::from_index(a).unwrap();
                let (next, reward, done) = transition(&state, action).unwrap();
                let out = env.step(action).unwrap();
                prop_assert_eq!(out.reward, reward);
                prop_assert_eq!(out.done, done);
                prop_assert_eq!(env.state(), &next);
                state = next;
            }
        }
    }

    #[test]
    fn metrics_rows_round_trip(
        rows in proptest::collection::vec(
            (0usize..100_000, 0usize..4, any::<u64>(), 0usize..6, -1.4f64..2.4, 0.0f64..2.0, 1usize..100),
            0..20,
        )
    ) {
        let records: Vec<RunRecord> = rows
            .into_iter()
            .map(|(step, s, seed, v, mean_return, std_return, episodes)| RunRecord {
                step,
                suite: Suite::ALL[s],
                seed,
                variant: Variant::ALL[v],
                mean_return,
                std_return,
                episodes,
            })
            .collect();
        let mut text = HEADER.join(",") + "\n";
        for r in &records {
            text += &(r.to_line() + "\n");
        }
        prop_assert_eq!(parse_metrics(text.as_bytes()).unwrap(), records);
    }
}
