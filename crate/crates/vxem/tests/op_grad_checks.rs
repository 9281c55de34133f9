//! Analytic vs central finite-difference gradients for every differentiable
//! op, 50 random seeds each, tiny shapes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vxem::error::{Result, VxError};
use vxem::gradcheck::grad_check;
use vxem::graph::{Graph, NodeId};
use vxem::tensor::{ParamSet, Tensor};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Dots the node against a fixed random probe so the incoming gradient is
/// position-dependent, then reduces to a scalar.
fn probed_loss(g: &mut Graph, out: NodeId, probe: &[f64]) -> Result<f64> {
    let c = g.constant(g.shape(out).to_vec(), probe.to_vec())?;
    let prod = g.mul(out, c)?;
    let loss = g.sum_all(prod);
    Ok(g.value(loss))
}

fn probe_for(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Runs `build` to a scalar loss for one seed, backprops the last node,
/// then compares against finite differences of the same closure.
fn check_op<F>(seed: u64, params: ParamSet, build: F) -> f64
where
    F: Fn(&mut Graph, &ParamSet) -> Result<f64>,
{
    let mut params = params;
    let mut g = Graph::new();
    let v = build(&mut g, &params).unwrap();
    assert!(v.is_finite(), "seed {seed}: non-finite loss");
    let loss = g.last_node().unwrap();
    g.backward(loss).unwrap();
    g.apply_grads(&mut params);

    let forward = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        build(&mut g, ps)
    };
    grad_check(forward, &mut params, EPS).unwrap()
}

macro_rules! seeds {
    ($body:expr) => {
        for seed in 0..50u64 {
            let err: f64 = $body(seed);
            assert!(err < TOL, "seed {seed}: relative error {err}");
        }
    };
}

#[test]
fn conv2d_gradients() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
        let (h, w) = (rng.random_range(4..7), rng.random_range(4..7));
        let mut ps = ParamSet::new();
        ps.insert("x", tensor(&mut rng, vec![ci, h, w])).unwrap();
        ps.insert("k", tensor(&mut rng, vec![co, ci, 3, 3])).unwrap();
        ps.insert("b", tensor(&mut rng, vec![co])).unwrap();
        let probe = probe_for(&mut rng, co * (h - 2) * (w - 2));
        check_op(seed, ps, move |g, ps| {
            let x = g.param(ps, "x")?;
            let k = g.param(ps, "k")?;
            let b = g.param(ps, "b")?;
            let y = g.conv2d(x, k, Some(b))?;
            probed_loss(g, y, &probe)
        })
    });
}

#[test]
fn conv3d_gradients() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
        let kd = rng.random_range(1..3);
        let d = rng.random_range(kd..kd + 2);
        let (h, w) = (rng.random_range(4..6), rng.random_range(4..6));
        let mut ps = ParamSet::new();
        ps.insert("x", tensor(&mut rng, vec![ci, d, h, w])).unwrap();
        ps.insert("k", tensor(&mut rng, vec![co, ci, kd, 3, 3]))
            .unwrap();
        ps.insert("b", tensor(&mut rng, vec![co])).unwrap();
        let probe = probe_for(&mut rng, co * (d - kd + 1) * (h - 2) * (w - 2));
        check_op(seed, ps, move |g, ps| {
            let x = g.param(ps, "x")?;
            let k = g.param(ps, "k")?;
            let b = g.param(ps, "b")?;
            let y = g.conv3d(x, k, Some(b))?;
            probed_loss(g, y, &probe)
        })
    });
}

#[test]
fn tconv3d_gradients() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
        let d = rng.random_range(2..4);
        let (h, w) = (rng.random_range(3..5), rng.random_range(3..5));
        let sd = rng.random_range(1..3);
        let same = seed % 2 == 0;
        let mut ps = ParamSet::new();
        ps.insert("x", tensor(&mut rng, vec![ci, d, h, w])).unwrap();
        ps.insert("k", tensor(&mut rng, vec![ci, co, 2, 3, 3]))
            .unwrap();
        let osh = vxem::kernels::tconv3_out_shape([ci, d, h, w], [ci, co, 2, 3, 3], [sd, 1, 1], same);
        let probe = probe_for(&mut rng, osh.iter().product());
        check_op(seed, ps, move |g, ps| {
            let x = g.param(ps, "x")?;
            let k = g.param(ps, "k")?;
            let y = g.conv3d_transposed(x, k, [sd, 1, 1], same)?;
            probed_loss(g, y, &probe)
        })
    });
}

#[test]
fn maxpool2_gradients() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let c = rng.random_range(1..3);
        let (h, w) = (rng.random_range(4..9), rng.random_range(4..9));
        let mut ps = ParamSet::new();
        ps.insert("x", tensor(&mut rng, vec![c, 1, h, w])).unwrap();
        let probe = probe_for(&mut rng, c * (h / 2) * (w / 2));
        check_op(seed, ps, move |g, ps| {
            let x = g.param(ps, "x")?;
            let y = g.maxpool2(x)?;
            probed_loss(g, y, &probe)
        })
    });
}

#[test]
fn maxpool2_constant_input_routes_to_first_element() {
    // On a constant plane every window ties; the gradient must land on each
    // window's first element in scan order.
    let mut ps = ParamSet::new();
    ps.insert("x", Tensor::new(vec![1, 1, 2, 2], vec![0.5; 4]).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let x = g.param(&ps, "x").unwrap();
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.data(y), [0.5]);
    let loss = g.sum_all(y);
    g.backward_into(loss, &mut ps).unwrap();
    assert_eq!(ps.get("x").unwrap().grad().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn dense_gradients_and_identity() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (n, m) = (rng.random_range(2..6), rng.random_range(1..5));
        let mut ps = ParamSet::new();
        ps.insert("x", tensor(&mut rng, vec![n])).unwrap();
        ps.insert("w", tensor(&mut rng, vec![m, n])).unwrap();
        ps.insert("b", tensor(&mut rng, vec![m])).unwrap();
        let probe = probe_for(&mut rng, m);
        check_op(seed, ps, move |g, ps| {
            let x = g.param(ps, "x")?;
            let w = g.param(ps, "w")?;
            let b = g.param(ps, "b")?;
            let y = g.dense(x, w, b)?;
            probed_loss(g, y, &probe)
        })
    });

    // Identity weight copies the input; zero weight yields the bias.
    let mut g = Graph::new();
    let x = g.constant(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
    let eye = g
        .constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        .unwrap();
    let zero_b = g.constant(vec![3], vec![0.0; 3]).unwrap();
    let y = g.dense(x, eye, zero_b).unwrap();
    assert_eq!(g.data(y), [1.0, -2.0, 3.0]);

    let zero_w = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2], vec![0.25, -0.5]).unwrap();
    let y = g.dense(x, zero_w, b).unwrap();
    assert_eq!(g.data(y), [0.25, -0.5]);
}

#[test]
fn elementwise_and_structural_gradients() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let (d, h, w) = (
            rng.random_range(2..4),
            rng.random_range(5..8),
            rng.random_range(5..8),
        );
        let mut ps = ParamSet::new();
        // Bound away from the relu kink so finite differences stay clean.
        let n = 2 * d * h * w;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        ps.insert("x", Tensor::new(vec![2, d, h, w], data).unwrap())
            .unwrap();
        let (ch, cw) = (h - 2, w - 3);
        let probe = probe_for(&mut rng, 2 * d * ch * cw);
        check_op(seed, ps, move |g, ps| {
            let x = g.param(ps, "x")?;
            let r = g.relu(x);
            let s = g.sigmoid(r);
            let p = g.pad_hw(s, 1, 1)?;
            let c = g.center_crop(p, [2, d, ch, cw])?;
            let c2 = g.scale(c, 1.5);
            let c3 = g.add(c, c2)?;
            probed_loss(g, c3, &probe)
        })
    });
}

#[test]
fn reslice_and_slice_gradients() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let (d, h, w) = (
            rng.random_range(3..5),
            rng.random_range(3..5),
            rng.random_range(3..5),
        );
        let x_idx = rng.random_range(0..w);
        let y_idx = rng.random_range(0..h);
        let z_idx = rng.random_range(0..d);
        let mut ps = ParamSet::new();
        ps.insert("x", tensor(&mut rng, vec![1, d, h, w])).unwrap();
        let probe = probe_for(&mut rng, d * h + d * w + h * w);
        check_op(seed, ps, move |g, ps| {
            let x = g.param(ps, "x")?;
            let yz = g.reslice_yz(x, x_idx)?;
            let xz = g.reslice_xz(x, y_idx)?;
            let zl = g.slice_z(x, z_idx)?;
            let a = g.reshape(yz, vec![d * h])?;
            let b = g.reshape(xz, vec![d * w])?;
            let c = g.reshape(zl, vec![h * w])?;
            let cat = g.concat(&[a, b, c])?;
            probed_loss(g, cat, &probe)
        })
    });
}

#[test]
fn dropout_gradients_with_replayed_mask() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let mut ps = ParamSet::new();
        ps.insert("x", tensor(&mut rng, vec![1, 1, 4, 4])).unwrap();
        let probe = probe_for(&mut rng, 16);
        let mask_seed = 8000 + seed;
        check_op(seed, ps, move |g, ps| {
            let x = g.param(ps, "x")?;
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let y = g.dropout(x, 0.5, &mut mask_rng, true)?;
            probed_loss(g, y, &probe)
        })
    });
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let off = g.dropout(x, 0.5, &mut rng, false).unwrap();
    assert_eq!(off, x, "inference-mode dropout adds no node");
    let p0 = g.dropout(x, 0.0, &mut rng, true).unwrap();
    assert_eq!(p0, x, "p=0 dropout adds no node");
}

#[test]
fn loss_op_gradients() {
    seeds!(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let n = rng.random_range(3..9);
        let mut ps = ParamSet::new();
        ps.insert("a", tensor(&mut rng, vec![n])).unwrap();
        // Separation keeps |a - b| away from the L1 kink under FD probes.
        let b_data: Vec<f64> = ps.get("a").unwrap().data().iter().map(|v| v + 0.75).collect();
        ps.insert("b", Tensor::new(vec![n], b_data).unwrap()).unwrap();
        ps.insert("d", tensor(&mut rng, vec![1])).unwrap();
        let label = f64::from(seed % 2 == 0);
        check_op(seed, ps, move |g, ps| {
            let a = g.param(ps, "a")?;
            let b = g.param(ps, "b")?;
            let d = g.param(ps, "d")?;
            let l1 = g.l1_sum(a, b)?;
            let mse = g.mse_mean(a, b)?;
            let bce = g.bce_with_logits(d, label)?;
            let total = g.add_n(&[l1, mse, bce])?;
            Ok(g.value(total))
        })
    });
}

#[test]
fn spec_backward_examples() {
    // loss = sum(w ⊙ x) with x constant gives grad(w) = x.
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::new(vec![3], vec![0.2, -0.4, 0.8]).unwrap())
        .unwrap();
    let x = [3.0, 5.0, -7.0];
    let mut g = Graph::new();
    let w = g.param(&ps, "w").unwrap();
    let xc = g.constant(vec![3], x.to_vec()).unwrap();
    let prod = g.mul(w, xc).unwrap();
    let loss = g.sum_all(prod);
    g.backward_into(loss, &mut ps).unwrap();
    assert_eq!(ps.get("w").unwrap().grad().unwrap(), &x);

    // loss = sigmoid(w) at w = 0 has gradient 0.25.
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let w = g.param(&ps, "w").unwrap();
    let s = g.sigmoid(w);
    g.backward_into(s, &mut ps).unwrap();
    assert_eq!(ps.get("w").unwrap().grad().unwrap(), &[0.25]);
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut ps = ParamSet::new();
    ps.insert("k", tensor(&mut rng, vec![1, 1, 1, 3, 3])).unwrap();
    let input: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();

    let run = |ps: &mut ParamSet, times: usize| -> Vec<f64> {
        ps.zero_grads();
        let mut g = Graph::new();
        let x = g.constant(vec![1, 1, 5, 5], input.clone()).unwrap();
        let k = g.param(ps, "k").unwrap();
        let y = g.conv3d(x, k, None).unwrap();
        let loss = g.sum_all(y);
        for _ in 0..times {
            g.backward_into(loss, ps).unwrap();
        }
        ps.get("k").unwrap().grad().unwrap().to_vec()
    };

    let once = run(&mut ps, 1);
    let twice = run(&mut ps, 2);
    let doubled: Vec<f64> = once.iter().map(|v| 2.0 * v).collect();
    assert_eq!(twice, doubled);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        g.backward(x),
        Err(VxError::NonScalarLoss(_))
    ));
}

#[test]
fn adjoint_identity_over_random_draws() {
    // <conv(x), y> == <x, conv_transposed(y)> for stride 1, valid mode,
    // with the kernel reinterpreted in [ci, co] order for the transpose.
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for _ in 0..25 {
        let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
        let (d, h, w) = (
            rng.random_range(2..4),
            rng.random_range(3..6),
            rng.random_range(3..6),
        );
        let (kd, kh, kw) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        if d < kd || h < kh || w < kw {
            continue;
        }
        let x: Vec<f64> = (0..ci * d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kern: Vec<f64> = (0..co * ci * kd * kh * kw)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let osh = [co, d - kd + 1, h - kh + 1, w - kw + 1];
        let y: Vec<f64> = (0..osh.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();

        let mut g = Graph::new();
        let xn = g.constant(vec![ci, d, h, w], x.clone()).unwrap();
        let kn = g.constant(vec![co, ci, kd, kh, kw], kern.clone()).unwrap();
        let cx = g.conv3d(xn, kn, None).unwrap();
        let lhs: f64 = g.data(cx).iter().zip(&y).map(|(a, b)| a * b).sum();

        // The conv kernel buffer [co, ci, taps] is already the transposed
        // layout [C_in=co, C_out=ci, taps] for the adjoint direction.
        let yn = g.constant(osh.to_vec(), y).unwrap();
        let ktn = g.constant(vec![co, ci, kd, kh, kw], kern.clone()).unwrap();
        let tx = g.conv3d_transposed(yn, ktn, [1, 1, 1], false).unwrap();
        let rhs: f64 = g.data(tx).iter().zip(&x).map(|(a, b)| a * b).sum();

        assert!(
            (lhs - rhs).abs() < 1e-10,
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }
}
