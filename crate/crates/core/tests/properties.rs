use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nfmimo::estimation::{dequantize, quantize, QuantizerSpec};
use nfmimo::geometry::{bs_positions, pair_geometry, placement_to_triplet, AngleTriplet, LinearArray, Placement};
use nfmimo::harness::plotdata::summarize;
use nfmimo::linalg::{complex_gaussian, CVec};
use nfmimo::ota::random_precoders;
use nfmimo::precoding::{kkt_precoder_update, kkt_residual, mmse_combiners, mse, project_simplex, sinr_rate};

fn column(rows: usize, rng: &mut ChaCha8Rng) -> CVec {
    complex_gaussian(rows, 1, 1.0, rng).column(0).into_owned()
}

proptest! {
    #[test]
    fn simplex_projection_lands_on_the_simplex(v in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let p = project_simplex(&v);
        prop_assert_eq!(p.len(), v.len());
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let again = project_simplex(&p);
        prop_assert!(again.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn simplex_projection_is_the_nearest_point(v in prop::collection::vec(-3.0f64..3.0, 2..6), w in prop::collection::vec(0.0f64..1.0, 6)) {
        let p = project_simplex(&v);
        let total: f64 = w[..v.len()].iter().sum::<f64>().max(1e-9);
        let other: Vec<f64> = w[..v.len()].iter().map(|x| x / total).collect();
        let dist = |a: &[f64]| a.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        prop_assert!(dist(&p) <= dist(&other) + 1e-12);
    }

    #[test]
    fn precoder_update_respects_power_and_stationarity(
        seed in any::<u64>(),
        ues in 1usize..4,
        streams in 1usize..3,
        budget in 0.01f64..10.0,
        weights in prop::collection::vec(0.01f64..20.0, 12),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eff: Vec<Vec<CVec>> = (0..ues).map(|_| (0..streams).map(|_| column(8, &mut rng)).collect()).collect();
        let nu: Vec<Vec<f64>> = (0..ues).map(|k| weights[k * streams..(k + 1) * streams].to_vec()).collect();
        let (set, eta) = kkt_precoder_update(&eff, &nu, budget).unwrap();
        prop_assert!(set.total_power() <= budget * (1.0 + 1e-9));
        prop_assert!(eta >= 0.0);
        if eta > 0.0 {
            prop_assert!((set.total_power() - budget).abs() <= 1e-6 * budget);
        }
        prop_assert!(kkt_residual(&eff, &nu, eta, &set) < 1e-6);
    }

    #[test]
    fn mmse_combiners_give_mse_one_over_one_plus_sinr(seed in any::<u64>(), noise in 1e-3f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hs: Vec<_> = (0..2).map(|_| complex_gaussian(3, 6, 1.0, &mut rng)).collect();
        let p = random_precoders(&[2, 1], 6, 1.0, &mut rng).unwrap();
        let noise = [noise, 2.0 * noise];
        let u = mmse_combiners(&hs, &p, &noise).unwrap();
        let r = sinr_rate(&hs, &p, &u, &noise).unwrap();
        for (k, group) in u.vectors.iter().enumerate() {
            for (s, c) in group.iter().enumerate() {
                let e = mse(&hs[k], c, k, s, &p, noise[k]);
                prop_assert!((e - 1.0 / (1.0 + r.sinr[k][s])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn summary_bands_bracket_the_mean(v in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let s = summarize(&v).unwrap();
        prop_assert_eq!(s[0], v.len() as f64);
        let (mean, bands) = (s[1], &s[2..]);
        prop_assert!(bands.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(bands[0] <= mean + 1e-9 && mean <= bands[6] + 1e-9);
    }

    #[test]
    fn constant_column_summarizes_to_itself(x in -1e6f64..1e6, n in 1usize..40) {
        let s = summarize(&vec![x; n]).unwrap();
        prop_assert!(s[1..].iter().all(|&v| (v - x).abs() <= 1e-9 * x.abs().max(1.0)));
    }

    #[test]
    fn pair_distances_match_coordinates(d in 4.5f64..8.5, beta in -1.39f64..1.39, gamma in 0.0f64..std::f64::consts::PI) {
        let bs = LinearArray::uniform_span(64, 2.0).unwrap();
        let ue = LinearArray::uniform(8, 0.015).unwrap();
        let p = Placement::new(d, beta, gamma).unwrap();
        let t = placement_to_triplet(&p, &bs, &ue).unwrap();
        let pg = pair_geometry(&t, &bs, &ue).unwrap();
        let b = bs_positions(&bs);
        for (n, u) in p.ue_positions(&bs, &ue).iter().enumerate() {
            for m in [0, 31, 63] {
                let want = (u - b[m]).norm();
                prop_assert!((pg.dist[(n, m)] - want).abs() < 1e-10 * want);
            }
        }
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step(
        bits in 2u32..14,
        a in -1.48f64..1.48,
        b in -1.48f64..1.48,
        g in 0.0f64..std::f64::consts::PI,
    ) {
        let ranges = [(-1.4835, 1.4835), (-1.4835, 1.4835), (0.0, std::f64::consts::PI)];
        let spec = QuantizerSpec::new(Some(bits), ranges).unwrap();
        let t = AngleTriplet::new(a, b, g);
        let back = dequantize(&quantize(&t, &spec), &spec);
        for i in 0..3 {
            prop_assert!((back.as_array()[i] - t.as_array()[i]).abs() <= 0.5 * spec.step(i) * (1.0 + 1e-12));
        }
    }
}

#[test]
fn unquantized_feedback_is_lossless() {
    let ranges = [(-1.4835, 1.4835), (-1.4835, 1.4835), (0.0, std::f64::consts::PI)];
    let spec = QuantizerSpec::new(None, ranges).unwrap();
    let t = AngleTriplet::new(0.123456789, -0.5, 2.0);
    assert_eq!(dequantize(&quantize(&t, &spec), &spec), t);
    assert_eq!(spec.error_variance(), [0.0; 3]);
}
