use e2v_core::evstream::*;
use proptest::prelude::*;

const W: u16 = 7;
const H: u16 = 5;

fn arb_events(max: usize) -> impl Strategy<Value = Vec<Event>> {
    // coarse timestamps so ties are common
    prop::collection::vec(
        (0u32..400, 0..W, 0..H, prop::bool::ANY).prop_map(|(t, x, y, pos)| Event::new(t as f64 * 0.0025, x, y, if pos { 1 } else { -1 })),
        0..max,
    )
}

/// Independent per-cell reference: for each cell and bin, sum the triangle
/// kernel max(0, 1 - |tau - b|) over the events at that pixel.
fn reference_grid(events: &[Event], bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; bins * (W as usize) * (H as usize)];
    if events.is_empty() {
        return out;
    }
    let t0 = events.iter().map(|e| e.t).fold(f64::MAX, f64::min);
    let t1 = events.iter().map(|e| e.t).fold(f64::MIN, f64::max);
    for b in 0..bins {
        for y in 0..H as usize {
            for x in 0..W as usize {
                let mut acc = 0.0;
                for e in events.iter().filter(|e| e.x as usize == x && e.y as usize == y) {
                    let tau = if t1 > t0 { (bins - 1) as f64 * (e.t - t0) / (t1 - t0) } else { 0.0 };
                    acc += e.p as f64 * (1.0 - (tau - b as f64).abs()).max(0.0);
                }
                out[(b * H as usize + y) * W as usize + x] = acc;
            }
        }
    }
    out
}

#[test]
fn split_matches_scalar_reference() {
    // tau = 1.25 of a negative event
    let evs = vec![Event::new(0.0, 0, 0, 1), Event::new(0.3125, 3, 2, -1), Event::new(1.0, 6, 4, 1)];
    let g = build_voxel_grid(&EventStream::new(evs.clone(), W, H).unwrap(), 5).unwrap();
    assert_eq!(g.at(3, 2, 1), -0.75);
    assert_eq!(g.at(3, 2, 2), -0.25);
    let r = reference_grid(&evs, 5);
    for (a, b) in g.data().iter().zip(&r) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn thousand_groups_conserve_mass() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(0..300);
        let evs: Vec<Event> = (0..n)
            .map(|_| Event::new(rng.random_range(0.0..0.05), rng.random_range(0..W), rng.random_range(0..H), if rng.random::<bool>() { 1 } else { -1 }))
            .collect();
        let s = EventStream::new(evs, W, H).unwrap();
        let g = build_voxel_grid(&s, 5).unwrap();
        assert!((g.sum() - s.polarity_sum() as f64).abs() <= 1e-6);
    }
}

proptest! {
    #[test]
    fn mass_is_conserved(evs in arb_events(200), bins in 1usize..8) {
        let s = EventStream::new(evs, W, H).unwrap();
        let g = build_voxel_grid(&s, bins).unwrap();
        prop_assert!((g.sum() - s.polarity_sum() as f64).abs() <= 1e-6);
    }

    #[test]
    fn grid_matches_reference(evs in arb_events(60), bins in 1usize..6) {
        let g = build_voxel_grid(&EventStream::new(evs.clone(), W, H).unwrap(), bins).unwrap();
        let r = reference_grid(&evs, bins);
        for (a, b) in g.data().iter().zip(&r) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_time_permutation_is_irrelevant(evs in arb_events(80), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = evs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = EventStream::new(evs, W, H).unwrap();
        let b = EventStream::new(shuffled, W, H).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(build_voxel_grid(&a, 5).unwrap(), build_voxel_grid(&b, 5).unwrap());
    }

    #[test]
    fn doubling_polarity_doubles_cells(evs in arb_events(80)) {
        // a doubled polarity is two coincident copies of the event
        let doubled: Vec<Event> = evs.iter().flat_map(|&e| [e, e]).collect();
        let g1 = build_voxel_grid(&EventStream::new(evs, W, H).unwrap(), 5).unwrap();
        let g2 = build_voxel_grid(&EventStream::new(doubled, W, H).unwrap(), 5).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            prop_assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duration_groups_cover_the_stream(evs in arb_events(150), dt_ms in 1u32..40) {
        let s = EventStream::new(evs, W, H).unwrap();
        let dt = dt_ms as f64 * 1e-3;
        let groups = group_fixed_duration(&s, dt).unwrap();
        let total: usize = groups.iter().map(|g| g.events.len()).sum();
        prop_assert_eq!(total, s.len());
        let joined: Vec<Event> = groups.iter().flat_map(|g| g.events.events().to_vec()).collect();
        prop_assert_eq!(joined.as_slice(), s.events());
        for (i, g) in groups.iter().enumerate() {
            let last = i + 1 == groups.len();
            for e in g.events.events() {
                prop_assert!(e.t >= g.start - 1e-9);
                prop_assert!(e.t < g.end + 1e-9 || (last && e.t <= g.end + 1e-9));
            }
        }
    }

    #[test]
    fn count_groups_are_exact(evs in arb_events(150), n in 1usize..40) {
        let s = EventStream::new(evs, W, H).unwrap();
        let groups = group_fixed_count(&s, n).unwrap();
        prop_assert_eq!(groups.len(), s.len() / n);
        for (i, g) in groups.iter().enumerate() {
            prop_assert_eq!(g.events.events(), &s.events()[i * n..(i + 1) * n]);
        }
    }

    #[test]
    fn zero_discard_is_plain_between_frames(evs in arb_events(150), seed in any::<u64>()) {
        let s = EventStream::new(evs, W, H).unwrap();
        let times: Vec<f64> = (0..12).map(|k| k as f64 * 0.1).collect();
        let a = group_between_frames(&s, &times, 0.0, seed).unwrap();
        let b = group_between_frames(&s, &times, 0.0, seed.wrapping_add(1)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), 11);
        for (k, g) in a.iter().enumerate() {
            prop_assert_eq!(g.end, times[k + 1]);
            for e in g.events.events() {
                prop_assert!(e.t <= times[k + 1] && (e.t > times[k] || (k == 0 && e.t >= times[0])));
            }
        }
    }

    #[test]
    fn discarding_merges_neighbouring_groups(evs in arb_events(150), ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let s = EventStream::new(evs, W, H).unwrap();
        let times: Vec<f64> = (0..20).map(|k| k as f64 * 0.05).collect();
        let kept = surviving_frames(times.len(), ratio, seed).unwrap();
        let expect_drop = ((ratio * 20.0).floor() as usize).min(18);
        prop_assert_eq!(kept.len(), 20 - expect_drop);
        let groups = group_between_frames(&s, &times, ratio, seed).unwrap();
        prop_assert_eq!(groups.len(), kept.len() - 1);
        let total: usize = groups.iter().map(|g| g.events.len()).sum();
        let inside = s.events().iter().filter(|e| e.t <= times[19]).count();
        prop_assert_eq!(total, inside);
    }
}

#[test]
fn heavy_discard_on_twenty_frames_leaves_one_group() {
    let evs: Vec<Event> = (0..40).map(|i| Event::new(i as f64 * 0.025, 1, 1, 1)).collect();
    let s = EventStream::new(evs, W, H).unwrap();
    let times: Vec<f64> = (0..20).map(|k| k as f64 * 0.05).collect();
    let groups = group_between_frames(&s, &times, 0.9, 42).unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!((groups[0].start, groups[0].end), (0.0, times[19]));
    assert_eq!(groups[0].events.len(), 39);
    let two = group_between_frames(&s, &times[..2], 0.7, 1).unwrap();
    assert_eq!(two.len(), 1);
}

#[test]
fn sweep_grids_have_expected_sizes() {
    let sparsity: Vec<usize> = (1..=9).map(|i| i * 5000).collect();
    assert_eq!(sparsity.len(), 9);
    assert_eq!((sparsity[0], sparsity[8]), (5000, 45000));
    let rates: Vec<u32> = (1..=10).map(|i| i * 10).collect();
    assert_eq!(rates.len(), 10);
}
