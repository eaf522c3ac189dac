use pipedec_core::tensor::kernels;

#[test]
#[ignore]
fn probe_matmul_rate() {
    let (m, k, n) = (32usize, 128, 128);
    let a = vec![1.0f32; m * k];
    let b = vec![0.5f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let iters = 20000;
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        kernels::matmul_acc(&a, &b, &mut c, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n) as f64 * iters as f64;
    println!("matmul_acc [{m}x{k}]x[{k}x{n}]: {:.2} GFLOP/s", flops / dt / 1e9);

    let mut out = vec![0.0f32; m * k];
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        kernels::matmul_bt_acc(&c, &b, &mut out, m, n, k);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul_bt_acc: {:.2} GFLOP/s", flops / dt / 1e9);

    let mut out2 = vec![0.0f32; k * n];
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        kernels::matmul_at_acc(&a, &c, &mut out2, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul_at_acc: {:.2} GFLOP/s", flops / dt / 1e9);
}
