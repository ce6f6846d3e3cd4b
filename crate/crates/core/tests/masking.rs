mod common;

use common::*;
use proptest::prelude::*;
use roadfill::masking::{
    apply_mask, generate_mask, masked_fraction, sample_mask_seed, schedule_at, MaskSchedule, MaskSpec, Milestone,
};
use roadfill::ImagePlane;

#[test]
fn table_schedule_rows() {
    let t = MaskSchedule::table();
    let rows = [(0, 100, 10), (10, 70, 12), (20, 52, 14), (30, 50, 15), (40, 25, 20), (50, 11, 30)];
    for (epoch, n, s) in rows {
        assert_eq!(schedule_at(&t, epoch), (n, s));
        // Values hold until the next milestone.
        assert_eq!(schedule_at(&t, epoch + 9), (n, s));
    }
    assert_eq!(schedule_at(&t, 119), (11, 30));
    let budget = |(n, s): (usize, usize)| n * s * s;
    assert_eq!(budget(schedule_at(&t, 0)), 10_000);
    assert_eq!(budget(schedule_at(&t, 50)), 9_900);
}

#[test]
fn schedule_validation() {
    let m = |epoch, cluster_count, cluster_size| Milestone { epoch, cluster_count, cluster_size };
    assert!(MaskSchedule::new(vec![]).is_err());
    assert!(MaskSchedule::new(vec![m(1, 5, 5)]).is_err());
    assert!(MaskSchedule::new(vec![m(0, 5, 5), m(0, 4, 6)]).is_err());
    assert!(MaskSchedule::new(vec![m(0, 5, 5), m(3, 6, 6)]).is_err());
    assert!(MaskSchedule::new(vec![m(0, 5, 5), m(3, 4, 4)]).is_err());
    assert!(MaskSchedule::new(vec![m(0, 5, 0)]).is_err());
    let text = "# epoch count size\n0 100 10\n10 70 12\n";
    let parsed: MaskSchedule = text.parse().unwrap();
    assert_eq!(parsed.to_string().parse::<MaskSchedule>().unwrap(), parsed);
}

#[test]
fn rejects_oversized_squares() {
    assert!(generate_mask(8, 16, &MaskSpec::new(1, 9, 0)).is_err());
    assert!(generate_mask(8, 8, &MaskSpec::new(1, 0, 0)).is_err());
}

#[test]
fn zero_clusters_keep_everything() {
    let m = generate_mask(16, 16, &MaskSpec::new(0, 4, 7)).unwrap();
    assert_eq!(masked_fraction(&m), 0.0);
}

#[test]
fn one_full_square_masks_everything() {
    let m = generate_mask(12, 12, &MaskSpec::new(1, 12, 3)).unwrap();
    assert_eq!(masked_fraction(&m), 1.0);
}

#[test]
fn apply_mask_zeroes_removed_pixels_only() {
    let mut r = rng(9);
    let img = random_plane(&mut r, 16, 16, 3);
    let mask = generate_mask(16, 16, &MaskSpec::new(3, 4, 11)).unwrap();
    let out = apply_mask(&img, &mask).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            for c in 0..3 {
                let want = if mask.get(y, x) == 1 { img.get(y, x, c) } else { 0.0 };
                assert_eq!(out.get(y, x, c), want);
            }
        }
    }
    assert!(apply_mask(&ImagePlane::zeros(8, 8, 3), &mask).is_err());
}

#[test]
fn per_sample_seeds_differ() {
    let seeds: std::collections::BTreeSet<u64> = (0..4)
        .flat_map(|e| (0..50).map(move |i| sample_mask_seed(0, 1, e, i)))
        .collect();
    assert_eq!(seeds.len(), 200);
    assert_eq!(sample_mask_seed(3, 1, 2, 5), sample_mask_seed(3, 1, 2, 5));
    assert_ne!(sample_mask_seed(3, 1, 2, 5), sample_mask_seed(3, 2, 2, 5));
}

#[test]
fn randomized_invariants() {
    let mut r = rng(11);
    for _ in 0..500 {
        let (h, w, spec) = random_mask_case(&mut r);
        mask_invariants(h, w, &spec).unwrap();
    }
}

proptest! {
    #[test]
    fn invariants_hold(h in 1usize..48, w in 1usize..48, count in 0usize..80, frac in 0.0f64..1.0, seed: u64) {
        let size = 1 + ((h.min(w) - 1) as f64 * frac) as usize;
        let spec = MaskSpec::new(count, size, seed);
        prop_assert_eq!(mask_invariants(h, w, &spec), Ok(()));
    }

    #[test]
    fn mask_is_idempotent(h in 4usize..40, count in 0usize..30, seed: u64) {
        let spec = MaskSpec::new(count, 4, seed);
        let mut r = rng(seed);
        let img = random_plane(&mut r, h, h, 3);
        let mask = generate_mask(h, h, &spec).unwrap();
        let once = apply_mask(&img, &mask).unwrap();
        prop_assert_eq!(apply_mask(&once, &mask).unwrap(), once);
    }

    #[test]
    fn schedule_lookup_is_monotone(e1 in 0usize..200, e2 in 0usize..200) {
        let t = MaskSchedule::table();
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let (a, b) = (t.at(lo), t.at(hi));
        prop_assert!(b.0 <= a.0 && b.1 >= a.1);
    }
}
