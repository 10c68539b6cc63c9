//! Property tests over the selection operators, schedule, and formats.

use lorsu::dataio::{generate, Dataset, SyntheticSpec};
use lorsu::select::top_c;
use lorsu::tensor::Tape;
use lorsu::train::{lr_at, ScheduleConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_c_budget_exact_and_scale_invariant(
        xs in prop::collection::vec(-100.0f64..100.0, 1..24),
        c_frac in 0.0f64..1.0,
        scale in 0.001f64..1000.0,
    ) {
        let c = ((xs.len() as f64) * c_frac) as usize;
        let mask = top_c(&xs, c).unwrap();
        prop_assert_eq!(mask.iter().filter(|&&b| b).count(), c);
        let scaled: Vec<f64> = xs.iter().map(|x| x * scale).collect();
        prop_assert_eq!(top_c(&scaled, c).unwrap(), mask);
    }

    #[test]
    fn softmax_rows_always_normalized(
        rows in 1usize..6,
        cols in 1usize..8,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() * 200.0 - 100.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(rows, cols, data);
        let s = tape.softmax_rows(x);
        for row in tape.value(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn schedule_stays_within_bounds(
        peak in 1e-6f64..1.0,
        min_frac in 0.0f64..1.0,
        total in 1u64..500,
        warmup_frac in 0.0f64..1.0,
    ) {
        let min_lr = peak * min_frac;
        let warmup = (total as f64 * warmup_frac) as u64;
        let s = ScheduleConfig { peak_lr: peak, warmup_steps: warmup, total_steps: total, min_lr };
        for step in 0..=total {
            let lr = lr_at(&s, step).unwrap();
            prop_assert!(lr <= peak + 1e-15, "lr {} above peak {}", lr, peak);
            prop_assert!(lr >= 0.0);
        }
    }

    #[test]
    fn dataset_roundtrip_for_random_specs(
        classes in 1usize..6,
        per_class in 1usize..4,
        seed in any::<u64>(),
        offset in 0usize..8,
        noise in 0.0f64..0.3,
    ) {
        let mut spec = SyntheticSpec::new(classes, per_class, seed);
        spec.image_size = 8;
        spec.class_offset = offset;
        spec.noise_std = noise;
        let ds = generate(&spec).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back, ds);
    }
}
