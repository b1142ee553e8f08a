mod common;

use common::{brute_spearman, markdown_oracle};
use proptest::prelude::*;
use reward_calib::calibrate::{calibrate_mean, pair_margin, Method};
use reward_calib::dataset::{
    markdown_features, parse_samples, write_samples_jsonl, zscore_normalize, SampleFormat, LENGTH,
};
use reward_calib::metrics::{bt_win_rate, pairwise_accuracy, rank_models, spearman};
use reward_calib::synth::{self, BiasShape, CharDistribution, SynthConfig, SynthRng};
use reward_calib::{
    calibrate, CalibratedSet, CalibrationConfig, Matrix, PreferencePair, SampleSet, ScoredSample,
};

fn small_set(rng: &mut SynthRng, n: usize) -> (SampleSet, Vec<PreferencePair>) {
    let samples: Vec<ScoredSample> = (0..n)
        .map(|i| {
            let c = 100.0 + 900.0 * rng.uniform();
            ScoredSample::new(format!("x{i}"), 0.003 * c + rng.normal()).with_characteristic(LENGTH, c)
        })
        .collect();
    let pairs = (0..n / 2)
        .map(|k| PreferencePair::new(k.to_string(), format!("x{}", 2 * k), format!("x{}", 2 * k + 1)).unwrap())
        .collect();
    (SampleSet::new(samples).unwrap(), pairs)
}

fn shifted(set: &SampleSet, by: f64) -> SampleSet {
    SampleSet::new(
        set.iter()
            .map(|s| {
                let mut s = s.clone();
                s.reward += by;
                s
            })
            .collect(),
    )
    .unwrap()
}

fn margins(cal: &CalibratedSet, pairs: &[PreferencePair]) -> Vec<f64> {
    pairs.iter().map(|p| pair_margin(cal, p).unwrap().margin).collect()
}

fn config(method: Method, gamma: f64) -> CalibrationConfig {
    CalibrationConfig {
        gamma,
        d: Some(60.0),
        min_neighbors: 5,
        ..CalibrationConfig::with_method(method)
    }
}

#[test]
fn margins_are_linear_in_gamma() {
    let mut rng = SynthRng::new(21);
    let (set, pairs) = small_set(&mut rng, 300);
    for method in Method::ALL {
        let at = |g| margins(&calibrate(&set, &config(method, g), Some(&pairs)).unwrap(), &pairs);
        let (m0, mh, m1) = (at(0.0), at(0.5), at(1.0));
        for i in 0..pairs.len() {
            assert!((mh[i] - 0.5 * (m0[i] + m1[i])).abs() < 1e-10, "{method} pair {i}");
        }
    }
}

#[test]
fn gamma_zero_reproduces_raw_rewards() {
    let mut rng = SynthRng::new(22);
    let (set, _) = small_set(&mut rng, 200);
    for method in Method::ALL {
        let cal = calibrate(&set, &config(method, 0.0), None).unwrap();
        for (c, s) in cal.samples().iter().zip(set.iter()) {
            assert_eq!(c.calibrated_reward.to_bits(), s.reward.to_bits(), "{method}");
        }
    }
}

#[test]
fn common_shift_leaves_margins_unchanged() {
    let mut rng = SynthRng::new(23);
    let (set, pairs) = small_set(&mut rng, 300);
    let moved = shifted(&set, 7.5);
    for method in Method::ALL {
        let cfg = config(method, 1.0);
        let a = calibrate(&set, &cfg, Some(&pairs)).unwrap();
        let b = calibrate(&moved, &cfg, Some(&pairs)).unwrap();
        for (x, y) in margins(&a, &pairs).iter().zip(margins(&b, &pairs)) {
            assert!((x - y).abs() < 1e-9, "{method}: {x} vs {y}");
        }
        for (x, y) in a.samples().iter().zip(b.samples()) {
            let expected = if x.calibrated_flag && method != Method::Penalty && method != Method::Original {
                // the bias absorbs the shift
                x.calibrated_reward
            } else {
                x.calibrated_reward + 7.5
            };
            assert!((y.calibrated_reward - expected).abs() < 1e-9, "{method}");
        }
    }
}

#[test]
fn zero_alpha_penalty_matches_plain_lwr() {
    let mut rng = SynthRng::new(24);
    let (set, _) = small_set(&mut rng, 250);
    let mut with_penalty = config(Method::RcLwrPenalty, 1.0);
    with_penalty.alpha = 0.0;
    let a = calibrate(&set, &with_penalty, None).unwrap();
    let b = calibrate(&set, &config(Method::RcLwr, 1.0), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lwr_penalty_is_penalty_then_lwr() {
    let mut rng = SynthRng::new(25);
    let (set, _) = small_set(&mut rng, 250);
    let combined = calibrate(&set, &config(Method::RcLwrPenalty, 1.0), None).unwrap();
    let penalised = calibrate(&set, &config(Method::Penalty, 1.0), None).unwrap();
    let stage_one = SampleSet::new(
        set.iter()
            .zip(penalised.samples())
            .map(|(s, p)| {
                let mut s = s.clone();
                s.reward = p.calibrated_reward;
                s
            })
            .collect(),
    )
    .unwrap();
    let stage_two = calibrate(&stage_one, &config(Method::RcLwr, 1.0), None).unwrap();
    for (a, b) in combined.samples().iter().zip(stage_two.samples()) {
        assert!((a.calibrated_reward - b.calibrated_reward).abs() < 1e-12);
    }
}

#[test]
fn linear_rewards_calibrate_to_zero() {
    let samples: Vec<ScoredSample> = (0..200)
        .map(|i| {
            let c = 50.0 + 7.0 * i as f64;
            ScoredSample::new(format!("x{i}"), 0.01 * c - 3.0).with_characteristic(LENGTH, c)
        })
        .collect();
    let set = SampleSet::new(samples).unwrap();
    let cal = calibrate(&set, &config(Method::RcLwr, 1.0), None).unwrap();
    assert!(cal.samples().iter().all(|c| c.calibrated_reward.abs() < 1e-8));
}

#[test]
fn rc_mean_with_global_radius_keeps_margins() {
    let mut rng = SynthRng::new(26);
    let (set, pairs) = small_set(&mut rng, 120);
    let cal = calibrate_mean(&set, LENGTH, 1e6, 10).unwrap();
    let raw = CalibratedSet::raw(&set);
    for (a, b) in margins(&cal, &pairs).iter().zip(margins(&raw, &pairs)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn rc_mean_sparse_neighbourhood_falls_back_to_raw() {
    let mut samples: Vec<ScoredSample> = (0..20)
        .map(|i| ScoredSample::new(format!("d{i}"), i as f64).with_characteristic(LENGTH, 100.0 + i as f64))
        .collect();
    samples.push(ScoredSample::new("far", 9.0).with_characteristic(LENGTH, 5000.0));
    let set = SampleSet::new(samples).unwrap();
    let cal = calibrate_mean(&set, LENGTH, 50.0, 10).unwrap();
    let far = cal.get("far").unwrap();
    assert!(!far.calibrated_flag);
    assert_eq!(far.calibrated_reward, 9.0);
    let pair = PreferencePair::new("0", "far", "d3").unwrap();
    assert_eq!(pair_margin(&cal, &pair).unwrap().margin, 9.0 - 3.0);
    // dense side alone is calibrated by the mean of 0..19
    assert!((cal.get("d3").unwrap().calibrated_reward - (3.0 - 9.5)).abs() < 1e-12);
}

#[test]
fn multi_characteristic_calibration_runs_on_zscored_inputs() {
    let mut rng = SynthRng::new(27);
    let samples: Vec<ScoredSample> = (0..150)
        .map(|i| {
            let (a, b) = (1000.0 * rng.uniform(), 10.0 * rng.uniform());
            ScoredSample::new(format!("x{i}"), 0.002 * a + 0.1 * b)
                .with_characteristic(LENGTH, a)
                .with_characteristic("markdown", b)
        })
        .collect();
    let set = SampleSet::new(samples).unwrap();
    let mut cfg = config(Method::RcLwr, 1.0);
    cfg.characteristics = vec![LENGTH.into(), "markdown".into()];
    let cal = calibrate(&set, &cfg, None).unwrap();
    // rewards are affine in both characteristics, so the fit is exact
    assert!(cal.samples().iter().all(|c| c.calibrated_reward.abs() < 1e-8));
}

#[test]
fn zscore_columns_have_zero_mean_unit_std() {
    let mut rng = SynthRng::new(28);
    let a: Vec<f64> = (0..500).map(|_| 3000.0 * rng.uniform()).collect();
    let b: Vec<f64> = (0..500).map(|_| (rng.normal() * 2.0).exp()).collect();
    let z = zscore_normalize(&Matrix::from_columns(&[a, b]).unwrap());
    for c in 0..2 {
        let col = z.column(c);
        let mean = col.iter().sum::<f64>() / 500.0;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0).sqrt();
        assert!(mean.abs() < 1e-12, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-12, "std {std}");
    }
}

#[test]
fn markdown_counts_match_line_scanner() {
    let fragments = [
        "# Title", "###### six", "####### seven", "#nospace", "  ## indented", "- item", "* star",
        "+ plus", "-dash", "1. one", "12) twelve", "3.x", "plain text", "**bold** and **more**",
        "****", "** spaced **", "a **b", "**é**", "", "   ", "\t- tab item", "*single*",
    ];
    let mut rng = SynthRng::new(29);
    for _ in 0..50 {
        let lines = 1 + (rng.uniform() * 12.0) as usize;
        let text: Vec<&str> = (0..lines)
            .map(|_| fragments[(rng.uniform() * fragments.len() as f64) as usize])
            .collect();
        let text = text.join("\n");
        assert_eq!(markdown_features(&text), markdown_oracle(&text) as f64, "{text:?}");
    }
}

#[test]
fn spearman_agrees_with_brute_force_on_small_inputs() {
    let mut rng = SynthRng::new(30);
    for n in 2..=8 {
        for _ in 0..50 {
            // coarse values so ties are common
            let a: Vec<f64> = (0..n).map(|_| (rng.uniform() * 4.0).floor()).collect();
            let b: Vec<f64> = (0..n).map(|_| (rng.uniform() * 4.0).floor()).collect();
            match spearman(&a, &b) {
                Ok(v) => assert!((v - brute_spearman(&a, &b)).abs() < 1e-12),
                Err(_) => assert!(brute_spearman(&a, &b).is_nan()),
            }
        }
    }
}

#[test]
fn spearman_examples() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn accuracy_ignores_common_shift() {
    let mut rng = SynthRng::new(31);
    let (set, pairs) = small_set(&mut rng, 400);
    let a = pairwise_accuracy(&pairs, &CalibratedSet::raw(&set)).unwrap();
    let b = pairwise_accuracy(&pairs, &CalibratedSet::raw(&shifted(&set, -12.25))).unwrap();
    assert_eq!(a, b);
}

fn synth_config(n: usize, bias: BiasShape, seed: u64) -> SynthConfig {
    SynthConfig {
        n_samples: n,
        seed,
        bias_shape: bias,
        c_distribution: CharDistribution::Uniform { lo: 100.0, hi: 3000.0 },
        ..SynthConfig::default()
    }
}

#[test]
fn synthetic_truth_is_independent_of_characteristic() {
    for seed in [1, 2, 3] {
        let (set, _, truth) = synth::generate(&synth_config(10_000, BiasShape::Linear { slope: 0.002 }, seed)).unwrap();
        let c = truth.characteristics();
        assert!(spearman(&truth.true_rewards(), &c).unwrap().abs() < 0.05);
        assert!(spearman(&set.rewards(), &c).unwrap().abs() > 0.8);
        for (s, t) in set.iter().zip(&truth.records) {
            assert_eq!(s.reward, t.true_reward + t.bias_value);
        }
    }
}

#[test]
fn no_bias_means_observed_equals_truth() {
    let (set, _, truth) = synth::generate(&synth_config(1000, BiasShape::None, 4)).unwrap();
    for (s, t) in set.iter().zip(&truth.records) {
        assert_eq!(s.reward, t.true_reward);
    }
}

#[test]
fn lwr_recovers_true_margins() {
    let (set, pairs, truth) = synth::generate(&synth_config(10_000, BiasShape::Linear { slope: 0.002 }, 5)).unwrap();
    let raw = synth::recovery_report(&truth, &CalibratedSet::raw(&set), &pairs).unwrap();
    let cal = calibrate(&set, &CalibrationConfig::default(), None).unwrap();
    let lwr = synth::recovery_report(&truth, &cal, &pairs).unwrap();
    assert!(lwr.margin_mae < 0.25 * raw.margin_mae, "{} vs {}", lwr.margin_mae, raw.margin_mae);
    assert!(lwr.accuracy > 0.9);
    assert!(lwr.residual_spearman.unwrap().abs() < 0.05);
}

#[test]
fn fast_oscillating_bias_defeats_calibration() {
    let shape = BiasShape::Sine { amplitude: 1.5, period: 40.0 };
    let (set, pairs, truth) = synth::generate(&synth_config(10_000, shape, 6)).unwrap();
    let raw = synth::recovery_report(&truth, &CalibratedSet::raw(&set), &pairs).unwrap();
    let cal = calibrate(&set, &CalibrationConfig::default(), None).unwrap();
    let lwr = synth::recovery_report(&truth, &cal, &pairs).unwrap();
    assert!(lwr.margin_mae > 0.9 * raw.margin_mae, "{} vs {}", lwr.margin_mae, raw.margin_mae);
}

#[test]
fn ranking_follows_quality_after_calibration() {
    let cfg = SynthConfig {
        n_samples: 9_000,
        n_groups: 3,
        n_responses: 3,
        quality_means: vec![0.0, 0.5, 1.0],
        seed: 7,
        ..synth_config(0, BiasShape::Linear { slope: 0.002 }, 7)
    };
    let (set, _, _) = synth::generate(&cfg).unwrap();
    let cal = calibrate(&set, &CalibrationConfig::default(), None).unwrap();
    let ranked = rank_models(&set, &cal, "g0").unwrap();
    let order: Vec<&str> = ranked.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(order, ["g2", "g1", "g0"]);
}

#[test]
fn same_seed_same_data() {
    let cfg = synth_config(500, BiasShape::Logistic { scale: 0.01, midpoint: 1500.0 }, 8);
    assert_eq!(synth::generate(&cfg).unwrap(), synth::generate(&cfg).unwrap());
}

fn sample_strategy() -> impl Strategy<Value = ScoredSample> {
    (
        "[a-z0-9]{1,8}",
        -1e6f64..1e6,
        prop::option::of("[ -~é\n]{0,30}"),
        prop::option::of("[a-z]{1,4}"),
        prop::collection::btree_map("[a-z]{1,6}", -1e9f64..1e9, 0..3),
    )
        .prop_map(|(id, reward, text, group, characteristics)| {
            let mut s = ScoredSample::new(id, reward);
            s.text = text;
            s.group = group;
            s.characteristics = characteristics;
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_round_trip(samples in prop::collection::vec(sample_strategy(), 1..20)) {
        let mut seen = std::collections::HashSet::new();
        let samples: Vec<ScoredSample> = samples.into_iter().filter(|s| seen.insert(s.id.clone())).collect();
        let mut buf = Vec::new();
        write_samples_jsonl(&mut buf, &samples).unwrap();
        let parsed = parse_samples(buf.as_slice(), SampleFormat::Jsonl).unwrap();
        prop_assert_eq!(parsed.samples(), samples.as_slice());
    }

    #[test]
    fn spearman_is_symmetric(a in prop::collection::vec(-100.0f64..100.0, 3..40), seed in 0u64..1000) {
        let mut rng = SynthRng::new(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.normal()).collect();
        let (x, y) = (spearman(&a, &b).unwrap(), spearman(&b, &a).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(a in prop::collection::vec(-5.0f64..5.0, 3..40), seed in 0u64..1000) {
        let mut rng = SynthRng::new(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.normal()).collect();
        let base = spearman(&a, &b).unwrap();
        let cubed: Vec<f64> = a.iter().map(|v| v.powi(3)).collect();
        let expd: Vec<f64> = b.iter().map(|v| v.exp()).collect();
        prop_assert!((spearman(&cubed, &b).unwrap() - base).abs() < 1e-12);
        prop_assert!((spearman(&a, &expd).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn win_rates_are_complementary(pairs in prop::collection::vec((-60.0f64..60.0, -60.0f64..60.0), 1..50)) {
        let (r, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let total = bt_win_rate(&r, &b).unwrap() + bt_win_rate(&b, &r).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn win_rate_examples() {
    assert_eq!(bt_win_rate(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
    let sigma_one = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((bt_win_rate(&[1.0; 4], &[0.0; 4]).unwrap() - sigma_one).abs() < 1e-9);
    assert!((bt_win_rate(&[50.0], &[0.0]).unwrap() - 1.0).abs() < 1e-9);
    assert!(bt_win_rate(&[1.0], &[1.0, 2.0]).is_err());
}
