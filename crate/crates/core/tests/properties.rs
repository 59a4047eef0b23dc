//! Randomized invariants across modules.

use flexprompt_core::flexdata::{generate_protocol, ProtocolSetting, ProtocolSpec};
use flexprompt_core::metrics::{classification_rates, hter, ScoreSet};
use flexprompt_core::model::ParamCounts;
use flexprompt_core::prompt::cdc2d;
use flexprompt_core::{ModelConfig, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SETTINGS: [ProtocolSetting; 4] = [
    ProtocolSetting::RgbdMissD,
    ProtocolSetting::RgbirMissIr,
    ProtocolSetting::RgbdirOverlap,
    ProtocolSetting::RgbdirLimited,
];

fn ratio(p: usize, hidden: usize) -> f64 {
    let mut cfg = ModelConfig::vit_base();
    cfg.prompt_length = p;
    cfg.hidden_dim = hidden;
    ParamCounts::for_config(&cfg).ratio()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trainable_ratio_grows_with_prompts_and_hidden_width(half in 1usize..40, hidden in 1usize..64) {
        let p = 2 * half;
        prop_assert!(ratio(p + 2, hidden) >= ratio(p, hidden));
        prop_assert!(ratio(p, hidden + 1) >= ratio(p, hidden));
    }

    #[test]
    fn cdc_is_affine_in_theta(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, cin in 1usize..4, cout in 1usize..4, theta in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(h * w, cin, 1.0, &mut rng);
        let k = Tensor::uniform(9 * cin, cout, 1.0, &mut rng);
        let b = Tensor::uniform(1, cout, 1.0, &mut rng);
        let y0 = cdc2d(&x, &k, &b, 0.0, h, w).unwrap();
        let y1 = cdc2d(&x, &k, &b, 1.0, h, w).unwrap();
        let y = cdc2d(&x, &k, &b, theta, h, w).unwrap();
        let lerp = y0.zip_map(&y1, |a, c| a + theta * (c - a));
        prop_assert!(y.max_abs_diff(&lerp) < 1e-12);
    }

    #[test]
    fn protocols_are_deterministic_in_spec_and_ids(setting in 0usize..4, alpha in 0.0f64..=1.0, n in 1usize..200, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let spec = ProtocolSpec::new(SETTINGS[setting], alpha, seed);
        let a = generate_protocol(&ids, &spec).unwrap();
        prop_assert_eq!(&a, &generate_protocol(&ids, &spec).unwrap());
        prop_assert_eq!(a.realized_counts(), a.counts);
        prop_assert_eq!(a.counts.total(), n);
    }

    #[test]
    fn error_rates_average_exactly(scores in prop::collection::vec(0.0f64..=1.0, 2..40), tau in 0.0f64..=1.0) {
        let half = scores.len() / 2;
        let set = ScoreSet::from_classes(&scores[..half.max(1)], &scores[half.max(1)..]);
        prop_assume!(set.counts().1 > 0);
        let r = classification_rates(&set, tau).unwrap();
        prop_assert_eq!(r.acer, (r.apcer + r.bpcer) / 2.0);
        let h = hter(&set, tau).unwrap();
        prop_assert_eq!(h.hter, (h.far + h.frr) / 2.0);
    }
}
