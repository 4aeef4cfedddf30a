use indexnet_core::metrics::*;
use indexnet_core::Rng;
use proptest::prelude::*;

/// Connectivity error computed one pixel at a time: for every threshold, a
/// fresh depth-first search from the pixel itself decides whether it can
/// reach a fully opaque pixel through pixels where both mattes reach the
/// threshold.
fn conn_oracle(pred: &[f64], gt: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    let ok = |i: usize, t: f64| pred[i] >= t && gt[i] >= t;
    let is_source = |i: usize| pred[i] >= 1.0 && gt[i] >= 1.0;
    let reaches_source = |start: usize, t: f64| {
        if !is_source(start) && !ok(start, t) {
            return false;
        }
        let mut seen = vec![false; h * w];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            if is_source(p) {
                return true;
            }
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !seen[q] && (ok(q, t) || is_source(q)) {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        false
    };
    let phi = |a: f64, l: f64| 1.0 - if a - l >= 0.15 { a - l } else { 0.0 };
    let mut total = 0.0;
    for i in 0..h * w {
        if !mask[i] {
            continue;
        }
        let mut t_max = f64::NAN;
        for k in 0..10 {
            let t = k as f64 * 0.1;
            if reaches_source(i, t) {
                t_max = t;
            }
        }
        total += (phi(pred[i], t_max) - phi(gt[i], t_max)).abs();
    }
    total / 1000.0
}

fn crafted_cases() -> Vec<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (8, 8);
    let mut cases = Vec::new();

    // opaque core on the left, a disconnected soft blob on the right
    let mut gt = vec![0.0; h * w];
    for y in 0..8 {
        for x in 0..3 {
            gt[y * w + x] = 1.0;
        }
        gt[y * w + 3] = 0.6;
    }
    for y in 2..5 {
        for x in 5..7 {
            gt[y * w + x] = 0.8;
        }
    }
    let mut pred = gt.clone();
    pred[3 * w + 4] = 0.7; // bridges the blob in the prediction
    pred[2 * w + 5] = 0.5;
    cases.push((pred, gt.clone()));

    // a prediction that loses the bridge and fades the edge
    let mut pred = gt.clone();
    for y in 0..8 {
        pred[y * w + 3] = 0.3;
    }
    cases.push((pred, gt));

    // ramp away from an opaque corner with a hole in it
    let mut gt = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            gt[y * w + x] = (1.0 - 0.12 * (x + y) as f64).max(0.0);
        }
    }
    gt[w + 1] = 0.0;
    let pred: Vec<f64> = gt
        .iter()
        .enumerate()
        .map(|(i, &a)| if i % 3 == 0 { (a + 0.2).min(1.0) } else { a })
        .collect();
    cases.push((pred, gt));

    // two opaque islands joined only diagonally
    let mut gt = vec![0.2; h * w];
    gt[0] = 1.0;
    gt[9] = 1.0;
    gt[18] = 0.9;
    gt[27] = 0.9;
    let mut pred = gt.clone();
    pred[1] = 0.95;
    pred[10] = 0.95;
    cases.push((pred, gt));
    cases
}

#[test]
fn conn_matches_brute_force_oracle_on_crafted_cases() {
    let (h, w) = (8, 8);
    for (k, (pred, gt)) in crafted_cases().iter().enumerate() {
        for mask in [vec![true; h * w], (0..h * w).map(|i| i % 2 == 0).collect()] {
            let (c, fb) = conn_error(pred, gt, &mask, h, w, CONN_STEP, CONN_THETA).unwrap();
            assert!(!fb);
            let o = conn_oracle(pred, gt, &mask, h, w);
            assert!((c - o).abs() < 1e-12, "case {k}: {c} vs oracle {o}");
        }
    }
    // the crafted set must exercise the penalty, not only zeros
    let (p, g) = &crafted_cases()[1];
    assert!(conn_oracle(p, g, &vec![true; h * w], h, w) > 0.0);
}

#[test]
fn conn_matches_oracle_on_random_mattes() {
    let mut rng = Rng::new(21);
    for _ in 0..50 {
        let (h, w) = (8, 8);
        let gt: Vec<f64> = (0..h * w).map(|_| if rng.bernoulli(0.3) { 1.0 } else { rng.uniform() }).collect();
        let pred: Vec<f64> = gt.iter().map(|&a| if rng.bernoulli(0.5) { a } else { rng.uniform() }).collect();
        let mask: Vec<bool> = (0..h * w).map(|_| rng.bernoulli(0.7)).collect();
        let (c, fb) = conn_error(&pred, &gt, &mask, h, w, CONN_STEP, CONN_THETA).unwrap();
        if fb {
            continue;
        }
        assert!((c - conn_oracle(&pred, &gt, &mask, h, w)).abs() < 1e-12);
    }
}

#[test]
fn grad_error_matches_dense_reference() {
    // values from an independent dense implementation of the
    // Gaussian-derivative filter
    let (h, w) = (5, 5);
    let gt: Vec<f64> = (0..25).map(|i| if i % 5 >= 2 { 1.0 } else { 0.0 }).collect();
    let pred: Vec<f64> = (0..25).map(|i| if i % 5 >= 3 { 1.0 } else { 0.0 }).collect();
    let g = grad_error(&pred, &gt, &vec![true; 25], h, w, GRAD_SIGMA).unwrap();
    assert!((g - 0.022812834330553224).abs() < 1e-12, "{g}");

    let gt2: Vec<f64> = (0..25).map(|k| ((k / 5 * 5 + k % 5) % 7) as f64 / 6.0).collect();
    let pred2: Vec<f64> = (0..25).map(|k| gt2[(k % 5) * 5 + k / 5]).collect();
    let mask: Vec<bool> = (0..25).map(|k| k >= 5).collect();
    let g2 = grad_error(&pred2, &gt2, &mask, h, w, GRAD_SIGMA).unwrap();
    assert!((g2 - 0.0031327228717717885).abs() < 1e-12, "{g2}");
}

#[test]
fn fully_binary_identical_mattes_score_zero() {
    let (h, w) = (8, 8);
    let a: Vec<f64> = (0..64).map(|i| if (i / 8 + i % 8) % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let r = evaluate(&a, &a, &vec![true; 64], h, w).unwrap();
    assert_eq!((r.sad, r.mse, r.grad, r.conn), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(r.unknown_pixel_count, 64);
}

#[test]
fn noise_amplitude_orders_sad_and_mse() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let (h, w) = (16, 16);
        let gt: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let noise: Vec<f64> = (0..h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        let mask = vec![true; h * w];
        let mut prev = (0.0, 0.0);
        for amp in [0.0, 0.05, 0.1, 0.2, 0.4] {
            let pred: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| g + amp * n).collect();
            let cur = (sad(&pred, &gt, &mask), mse(&pred, &gt, &mask));
            assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
    }
}

#[test]
fn size_mismatch_is_an_error() {
    assert!(evaluate(&[0.0; 4], &[0.0; 4], &[true; 3], 2, 2).is_err());
    assert!(grad_error(&[0.0; 6], &[0.0; 6], &[true; 6], 2, 2, 1.4).is_err());
}

fn matte(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..1.0f64], h * w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_nonnegative_and_zero_on_equal(a in matte(6, 7), b in matte(6, 7),
                                                 m in prop::collection::vec(any::<bool>(), 42)) {
        let r = evaluate(&a, &b, &m, 6, 7).unwrap();
        prop_assert!(r.sad >= 0.0 && r.mse >= 0.0 && r.grad >= 0.0 && r.conn >= 0.0);
        let z = evaluate(&a, &a, &m, 6, 7).unwrap();
        prop_assert_eq!((z.sad, z.mse, z.grad, z.conn), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn sad_mse_grad_are_symmetric(a in matte(6, 6), b in matte(6, 6)) {
        let m = vec![true; 36];
        prop_assert_eq!(sad(&a, &b, &m), sad(&b, &a, &m));
        prop_assert_eq!(mse(&a, &b, &m), mse(&b, &a, &m));
        let (g1, g2) = (grad_error(&a, &b, &m, 6, 6, GRAD_SIGMA).unwrap(), grad_error(&b, &a, &m, 6, 6, GRAD_SIGMA).unwrap());
        prop_assert!((g1 - g2).abs() < 1e-15);
    }

    #[test]
    fn grad_is_invariant_to_constant_offsets(a in matte(7, 6), b in matte(7, 6), c in -0.5..0.5f64,
                                             m in prop::collection::vec(any::<bool>(), 42)) {
        let g = grad_error(&a, &b, &m, 7, 6, GRAD_SIGMA).unwrap();
        let a2: Vec<f64> = a.iter().map(|v| v + c).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + c).collect();
        let g2 = grad_error(&a2, &b2, &m, 7, 6, GRAD_SIGMA).unwrap();
        prop_assert!((g - g2).abs() < 1e-12 * (1.0 + g.abs()));
    }

    #[test]
    fn sad_and_mse_ignore_pixels_outside_mask(a in matte(5, 5), b in matte(5, 5), junk in matte(5, 5),
                                             m in prop::collection::vec(any::<bool>(), 25)) {
        let a2: Vec<f64> = (0..25).map(|i| if m[i] { a[i] } else { junk[i] }).collect();
        prop_assert_eq!(sad(&a, &b, &m), sad(&a2, &b, &m));
        prop_assert_eq!(mse(&a, &b, &m), mse(&a2, &b, &m));
    }
}
