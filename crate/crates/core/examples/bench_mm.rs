use scene_magnifier::tensor::{matmul, matmul_nt, Tensor};
fn main() {
    let mut rng = scene_magnifier::rng_from_seed(0);
    for (m, k, n) in [(138usize, 64usize, 64usize), (138, 16, 218), (3072, 35, 48), (552, 64, 90)] {
        let a64 = Tensor::<f64>::randn(vec![m, k], 1.0, &mut rng);
        let b64 = Tensor::<f64>::randn(vec![k, n], 1.0, &mut rng);
        let a32 = a64.cast::<f32>(); let b32 = b64.cast::<f32>();
        let iters = (2e9 / (m*k*n) as f64) as usize;
        let t = std::time::Instant::now();
        for _ in 0..iters { std::hint::black_box(matmul(&a64, &b64).unwrap()); }
        let gf64 = (2.0*(m*k*n*iters) as f64)/t.elapsed().as_secs_f64()/1e9;
        let t = std::time::Instant::now();
        for _ in 0..iters { std::hint::black_box(matmul(&a32, &b32).unwrap()); }
        let gf32 = (2.0*(m*k*n*iters) as f64)/t.elapsed().as_secs_f64()/1e9;
        let bt64 = Tensor::<f64>::randn(vec![n, k], 1.0, &mut rng);
        let t = std::time::Instant::now();
        for _ in 0..iters { std::hint::black_box(matmul_nt(&a64, &bt64).unwrap()); }
        let gnt = (2.0*(m*k*n*iters) as f64)/t.elapsed().as_secs_f64()/1e9;
        println!("{m}x{k}x{n}: f64 {gf64:.2} GF/s  f32 {gf32:.2} GF/s  nt-f64 {gnt:.2} GF/s");
    }
}
