//! Property tests for the numeric invariants.

use plm_core::partlab::{assign_part_labels, crop_random};
use plm_core::data::ImageGrid;
use plm_core::nn::MlpModel;
use plm_core::rng::substream;
use plm_core::tape::Tape;
use plm_core::transition::{apply_t, apply_u, S2mMatrix, TransitionMatrix};
use proptest::prelude::*;

fn simplex(c: usize, raw: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = raw[..c].iter().map(|v| v.abs() + 1e-6).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

proptest! {
    /// Softmax rows stay on the simplex for inputs up to magnitude 1e3.
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1e3f64..1e3, 2..24)) {
        let cols = 2 + values.len() % 5;
        let rows = values.len() / cols;
        prop_assume!(rows >= 1);
        let data = values[..rows * cols].to_vec();
        let mut tape = Tape::new();
        let x = tape.leaf(vec![rows, cols], data, false).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    /// Log-losses stay finite for any probabilities in [0, 1], including
    /// the exact endpoints, thanks to the shared clamp.
    #[test]
    fn losses_are_finite_on_clamped_inputs(
        raw in prop::collection::vec(0.0f64..=1.0, 4..16),
        label in 0usize..4,
        bits in prop::collection::vec(0u32..2, 4..16),
    ) {
        let c = 4;
        let rows = raw.len() / c;
        prop_assume!(rows >= 1);
        let mut tape = Tape::new();
        // rows renormalized so the cross-entropy precondition holds
        let mut ce_rows = Vec::new();
        for r in raw.chunks(c).take(rows) {
            ce_rows.extend(simplex(c, r));
        }
        let p = tape.leaf(vec![rows, c], ce_rows, false).unwrap();
        let labels = vec![label; rows];
        let ce = tape.cross_entropy_mean(p, &labels).unwrap();
        prop_assert!(tape.value(ce)[0].is_finite());

        let q = tape.leaf(vec![rows, c], raw[..rows * c].to_vec(), false).unwrap();
        let targets: Vec<f64> = bits[..rows * c].iter().map(|&b| f64::from(b)).collect();
        let bce = tape.bce_mean(q, &targets).unwrap();
        prop_assert!(tape.value(bce)[0].is_finite());
    }

    /// Applying a transition matrix preserves simplex membership.
    #[test]
    fn apply_t_preserves_simplex(
        raw_p in prop::collection::vec(0.0f64..1.0, 5),
        raw_t in prop::collection::vec(0.0f64..1.0, 25),
    ) {
        let c = 5;
        let p = simplex(c, &raw_p);
        let mut entries = Vec::new();
        for r in raw_t.chunks(c) {
            entries.extend(simplex(c, r));
        }
        let t = TransitionMatrix::from_entries(c, entries).unwrap();
        let q = apply_t(&t, &p).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(q.iter().all(|&v| v >= 0.0));
    }

    /// The single-to-multiple application is a convex combination, so
    /// outputs stay in [0, 1] entrywise.
    #[test]
    fn apply_u_stays_in_unit_interval(
        raw_p in prop::collection::vec(0.0f64..1.0, 4),
        raw_u in prop::collection::vec(0.0f64..=1.0, 16),
    ) {
        let c = 4;
        let p = simplex(c, &raw_p);
        let u = S2mMatrix::from_entries(c, raw_u).unwrap();
        let q = apply_u(&u, &p).unwrap();
        prop_assert!(q.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    /// Part-label vectors always set between 1 and K bits, and the crop
    /// order never matters.
    #[test]
    fn part_label_popcount_bounds(seed in 0u64..500, n_crops in 1usize..7) {
        let f = MlpModel::init(&[16, 6], &mut substream(99, "init-prop")).unwrap();
        let x = ImageGrid::new(4, 4, (0..16).map(|i| (i as f64) / 16.0).collect()).unwrap();
        let mut rng = substream(seed, "crops");
        let set = crop_random(&x, 3, n_crops, &mut rng).unwrap();
        let y = assign_part_labels(&f, &set).unwrap();
        prop_assert!(y.popcount() >= 1);
        prop_assert!(y.popcount() <= set.len());
        let mut reversed = set.clone();
        reversed.crops.reverse();
        prop_assert_eq!(assign_part_labels(&f, &reversed).unwrap(), y);
    }
}
