//! Convolution-family outputs checked against naive nested-loop references
//! on randomized small shapes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vxem::graph::Graph;
use vxem::oracles;

fn fill(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_trivial_cases() {
    let mut g = Graph::new();
    // All-ones 3x3 against an all-ones 3x3 kernel sums nine ones.
    let x = g.constant(vec![1, 3, 3], vec![1.0; 9]).unwrap();
    let k = g.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let b = g.constant(vec![1], vec![0.0]).unwrap();
    let y = g.conv2d(x, k, Some(b)).unwrap();
    assert_eq!(g.shape(y), [1, 1, 1]);
    assert_eq!(g.data(y), [9.0]);

    // A 1x1x1x1 identity kernel copies the input.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = fill(&mut rng, 20);
    let x = g.constant(vec![1, 4, 5], data.clone()).unwrap();
    let k = g.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let b = g.constant(vec![1], vec![0.0]).unwrap();
    let y = g.conv2d(x, k, Some(b)).unwrap();
    assert_eq!(g.data(y), &data[..]);
}

#[test]
fn conv2d_matches_loop_reference_on_seeded_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let input = fill(&mut rng, 2 * 6 * 6);
    let kernel = fill(&mut rng, 3 * 2 * 3 * 3);
    let bias = fill(&mut rng, 3);

    let expect = oracles::naive_conv2(&input, [2, 6, 6], &kernel, [3, 2, 3, 3], &bias);

    let mut g = Graph::new();
    let x = g.constant(vec![2, 6, 6], input).unwrap();
    let k = g.constant(vec![3, 2, 3, 3], kernel).unwrap();
    let b = g.constant(vec![3], bias).unwrap();
    let y = g.conv2d(x, k, Some(b)).unwrap();
    assert!(max_abs_diff(g.data(y), &expect) < 1e-12);
}

#[test]
fn conv3d_trivial_cases() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 2, 3, 3], vec![1.0; 18]).unwrap();
    let k = g.constant(vec![1, 1, 2, 3, 3], vec![1.0; 18]).unwrap();
    let b = g.constant(vec![1], vec![0.0]).unwrap();
    let y = g.conv3d(x, k, Some(b)).unwrap();
    assert_eq!(g.shape(y), [1, 1, 1, 1]);
    assert_eq!(g.data(y), [18.0]);
}

#[test]
fn conv3d_depth1_equals_per_slice_conv2d_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let d = rng.random_range(2..4);
        let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
        let input = fill(&mut rng, ci * d * h * w);
        let kernel = fill(&mut rng, co * ci * 3 * 3);
        let bias = fill(&mut rng, co);

        let mut g = Graph::new();
        let x = g.constant(vec![ci, d, h, w], input.clone()).unwrap();
        let k5 = {
            let k = g.constant(vec![co, ci, 3, 3], kernel.clone()).unwrap();
            g.reshape(k, vec![co, ci, 1, 3, 3]).unwrap()
        };
        let b = g.constant(vec![co], bias.clone()).unwrap();
        let y3 = g.conv3d(x, k5, Some(b)).unwrap();
        let (ho, wo) = (h - 2, w - 2);

        // Depth-1 kernels factor into independent per-slice 2d convolutions.
        for z in 0..d {
            let slice: Vec<f64> = (0..ci)
                .flat_map(|c| {
                    input[((c * d + z) * h) * w..((c * d + z + 1) * h) * w].to_vec()
                })
                .collect();
            let mut g2 = Graph::new();
            let xs = g2.constant(vec![ci, h, w], slice).unwrap();
            let ks = g2.constant(vec![co, ci, 3, 3], kernel.clone()).unwrap();
            let bs = g2.constant(vec![co], bias.clone()).unwrap();
            let y2 = g2.conv2d(xs, ks, Some(bs)).unwrap();
            for c in 0..co {
                for i in 0..ho * wo {
                    let v3 = g.data(y3)[((c * d + z) * ho * wo) + i];
                    let v2 = g2.data(y2)[c * ho * wo + i];
                    assert_eq!(v3, v2, "bitwise mismatch at c={c} z={z} i={i}");
                }
            }
        }
    }
}

#[test]
fn conv3d_matches_loop_reference_on_seeded_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = fill(&mut rng, 4 * 5 * 5);
    let kernel = fill(&mut rng, 2 * 2 * 3 * 3);
    let bias = fill(&mut rng, 2);

    let expect = oracles::naive_conv3(&input, [1, 4, 5, 5], &kernel, [2, 1, 2, 3, 3], &bias);

    let mut g = Graph::new();
    let x = g.constant(vec![1, 4, 5, 5], input).unwrap();
    let k = g.constant(vec![2, 1, 2, 3, 3], kernel).unwrap();
    let b = g.constant(vec![2], bias).unwrap();
    let y = g.conv3d(x, k, Some(b)).unwrap();
    assert!(max_abs_diff(g.data(y), &expect) < 1e-12);
}

#[test]
fn tconv3d_trivial_cases() {
    // Depth rule: D=5, kd=2, sd=2 gives (5-1)*2+2 = 10.
    let mut g = Graph::new();
    let x = g.constant(vec![1, 5, 4, 4], vec![0.5; 80]).unwrap();
    let k = g.constant(vec![1, 1, 2, 3, 3], vec![0.0; 18]).unwrap();
    let y = g.conv3d_transposed(x, k, [2, 1, 1], false).unwrap();
    assert_eq!(g.shape(y)[1], 10);

    // A single input tap spreads the kernel footprint scaled by its value.
    let v = -1.75;
    let mut g = Graph::new();
    let x = g.constant(vec![1, 1, 1, 1], vec![v]).unwrap();
    let k = g.constant(vec![1, 1, 2, 3, 3], vec![1.0; 18]).unwrap();
    let y = g.conv3d_transposed(x, k, [2, 1, 1], false).unwrap();
    assert_eq!(g.shape(y), [1, 2, 3, 3]);
    assert!(g.data(y).iter().all(|&o| o == v));
}

#[test]
fn tconv3d_matches_scatter_reference_on_seeded_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let input = fill(&mut rng, 3 * 4 * 4);
    let kernel = fill(&mut rng, 2 * 2 * 3 * 3);

    let (expect, esh) =
        oracles::naive_tconv3(&input, [1, 3, 4, 4], &kernel, [1, 2, 2, 3, 3], [2, 1, 1], true);

    let mut g = Graph::new();
    let x = g.constant(vec![1, 3, 4, 4], input).unwrap();
    let k = g.constant(vec![1, 2, 2, 3, 3], kernel).unwrap();
    let y = g.conv3d_transposed(x, k, [2, 1, 1], true).unwrap();
    assert_eq!(g.shape(y), esh);
    assert!(max_abs_diff(g.data(y), &expect) < 1e-12);
}

/// Randomized sweep: 100 shapes per operator family against the references.
#[test]
fn random_small_shapes_match_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for case in 0..100 {
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let kd = rng.random_range(1..3);
        let (kh, kw) = (rng.random_range(1..4), rng.random_range(1..4));
        let d = rng.random_range(kd..kd + 3);
        let h = rng.random_range(kh..kh + 5);
        let w = rng.random_range(kw..kw + 5);

        let input = fill(&mut rng, ci * d * h * w);
        let kernel = fill(&mut rng, co * ci * kd * kh * kw);
        let bias = fill(&mut rng, co);

        let expect = oracles::naive_conv3(
            &input,
            [ci, d, h, w],
            &kernel,
            [co, ci, kd, kh, kw],
            &bias,
        );
        let mut g = Graph::new();
        let x = g.constant(vec![ci, d, h, w], input.clone()).unwrap();
        let k = g
            .constant(vec![co, ci, kd, kh, kw], kernel.clone())
            .unwrap();
        let b = g.constant(vec![co], bias).unwrap();
        let y = g.conv3d(x, k, Some(b)).unwrap();
        assert!(
            max_abs_diff(g.data(y), &expect) < 1e-12,
            "conv3d case {case} diverged"
        );

        // Transposed: same draw reused with the channel axes swapped.
        let sd = rng.random_range(1..3);
        let same = rng.random::<bool>() && kh >= 1 && kw >= 1;
        let tkernel = fill(&mut rng, ci * co * kd * kh * kw);
        let (texpect, tsh) = oracles::naive_tconv3(
            &input,
            [ci, d, h, w],
            &tkernel,
            [ci, co, kd, kh, kw],
            [sd, 1, 1],
            same,
        );
        let mut g = Graph::new();
        let x = g.constant(vec![ci, d, h, w], input).unwrap();
        let k = g.constant(vec![ci, co, kd, kh, kw], tkernel).unwrap();
        let y = g.conv3d_transposed(x, k, [sd, 1, 1], same).unwrap();
        assert_eq!(g.shape(y), tsh, "tconv case {case} shape");
        assert!(
            max_abs_diff(g.data(y), &texpect) < 1e-12,
            "tconv case {case} diverged"
        );
    }
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::new();
    let x = g.constant(vec![2, 4, 4], vec![0.0; 32]).unwrap();
    let k_badch = g.constant(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap();
    assert!(g.conv2d(x, k_badch, None).is_err());

    let k_toolarge = g.constant(vec![1, 2, 5, 5], vec![0.0; 50]).unwrap();
    assert!(g.conv2d(x, k_toolarge, None).is_err());
}
