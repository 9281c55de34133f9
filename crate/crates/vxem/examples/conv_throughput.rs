//! Rough throughput numbers for the convolution kernels at training-scale
//! shapes. Run with `cargo run --release --example conv_throughput`.

use std::time::Instant;

use vxem::kernels;

fn bench(label: &str, macs: f64, mut f: impl FnMut()) {
    // warmup
    f();
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "{label:<42} {:>8.1} ms   {:>6.2} GMAC/s",
        dt * 1e3,
        macs / dt / 1e9
    );
}

fn main() {
    // 3d alignment mid-layer: [50,46,46,46] * [50,50,3,3,3]
    {
        let ish = [50, 46, 46, 46];
        let ksh = [50, 50, 3, 3, 3];
        let osh = [50, 44, 44, 44];
        let input = vec![0.5f64; ish.iter().product()];
        let kernel = vec![0.01f64; ksh.iter().product()];
        let bias = vec![0.0f64; 50];
        let mut out = vec![0.0f64; osh.iter().product()];
        let macs = (osh.iter().product::<usize>() * 50 * 27) as f64;
        bench("conv3 50->50 3x3x3 fwd (46^3)", macs, || {
            kernels::conv3_forward(&input, ish, &kernel, ksh, Some(&bias), &mut out)
        });
        let mut gin = vec![0.0f64; input.len()];
        bench("conv3 grad_input (46^3)", macs, || {
            kernels::conv3_grad_input(&out, osh, &kernel, ksh, &mut gin, ish)
        });
        let mut gk = vec![0.0f64; kernel.len()];
        bench("conv3 grad_kernel (46^3)", macs, || {
            kernels::conv3_grad_kernel(&input, ish, &out, osh, &mut gk, ksh)
        });
    }

    // 2d interpolation mid-layer: [50,2,28,28] * [50,50,1,3,3]
    {
        let ish = [50, 2, 28, 28];
        let ksh = [50, 50, 1, 3, 3];
        let osh = [50, 2, 26, 26];
        let input = vec![0.5f64; ish.iter().product()];
        let kernel = vec![0.01f64; ksh.iter().product()];
        let bias = vec![0.0f64; 50];
        let mut out = vec![0.0f64; osh.iter().product()];
        let macs = (osh.iter().product::<usize>() * 50 * 9) as f64;
        bench("conv3 50->50 1x3x3 fwd (2x28x28)", macs, || {
            kernels::conv3_forward(&input, ish, &kernel, ksh, Some(&bias), &mut out)
        });
        let mut gin = vec![0.0f64; input.len()];
        bench("conv3 grad_input (2x28x28)", macs, || {
            kernels::conv3_grad_input(&out, osh, &kernel, ksh, &mut gin, ish)
        });
        let mut gk = vec![0.0f64; kernel.len()];
        bench("conv3 grad_kernel (2x28x28)", macs, || {
            kernels::conv3_grad_kernel(&input, ish, &out, osh, &mut gk, ksh)
        });
    }

    // discriminator tower layer: [32,1,34,34] * [32,32,1,5,5]
    {
        let ish = [32, 1, 34, 34];
        let ksh = [32, 32, 1, 5, 5];
        let osh = [32, 1, 30, 30];
        let input = vec![0.5f64; ish.iter().product()];
        let kernel = vec![0.01f64; ksh.iter().product()];
        let bias = vec![0.0f64; 32];
        let mut out = vec![0.0f64; osh.iter().product()];
        let macs = (osh.iter().product::<usize>() * 32 * 25) as f64;
        bench("conv3 32->32 1x5x5 fwd (34x34)", macs, || {
            kernels::conv3_forward(&input, ish, &kernel, ksh, Some(&bias), &mut out)
        });
    }
}
