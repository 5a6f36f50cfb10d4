use firerisk_core::classify::{class_of, jenks_breaks, jenks_partition, partition_cost};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s
}

/// Every split of `n` sorted values into three non-empty runs.
fn three_way_min(x: &[f64]) -> (f64, Vec<usize>) {
    let n = x.len();
    let mut best = (f64::INFINITY, vec![]);
    for a in 1..n - 1 {
        for b in a + 1..n {
            let ends = vec![a, b, n];
            let c = partition_cost(x, &ends);
            if c < best.0 {
                best = (c, ends);
            }
        }
    }
    best
}

#[test]
fn brute_force_k3_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.gen_range(3..=12);
        let v: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..50.0f64)).round()).collect();
        let x = sorted(&v);
        let (cost, ends) = three_way_min(&x);
        let got = jenks_partition(&v, 3).unwrap();
        assert_eq!(partition_cost(&x, &got), cost, "{x:?}");
        assert_eq!(got, ends, "{x:?}");
        let breaks = jenks_breaks(&v, 3).unwrap();
        let distinct = x.windows(2).all(|w| w[0] < w[1]);
        for (i, xi) in x.iter().enumerate() {
            let expected = ends.iter().position(|e| i < *e).unwrap();
            if distinct {
                assert_eq!(class_of(&breaks, *xi), expected, "{x:?}: value {xi}");
            } else {
                // a run of equal values cut by a break maps wholly to the lower class
                assert!(class_of(&breaks, *xi) <= expected);
            }
        }
    }
}

#[test]
fn breaks_shift_and_scale_with_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let v: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..8.0f64).floor()).collect();
        let ends = jenks_partition(&v, 4).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + 100.0).collect();
        let scaled: Vec<f64> = v.iter().map(|x| x * 4.0).collect();
        assert_eq!(jenks_partition(&shifted, 4).unwrap(), ends);
        assert_eq!(jenks_partition(&scaled, 4).unwrap(), ends);
    }
}

#[test]
fn classes_are_contiguous_and_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..200).map(|_| rng.gen::<f64>().powi(3) * 40.0).collect();
    let breaks = jenks_breaks(&v, 5).unwrap();
    assert!(breaks.windows(2).all(|w| w[0] < w[1]));
    let x = sorted(&v);
    let classes: Vec<usize> = x.iter().map(|xi| class_of(&breaks, *xi)).collect();
    assert!(classes.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*classes.last().unwrap(), 4);
    assert_eq!(classes[0], 0);
}
