//! Rough single-core GEMM throughput probe used to size default model widths.

use std::time::Instant;

fn bench_f32(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9
}

fn bench_f64(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = vec![1.0f64; m * k];
    let b = vec![1.0f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9
}

fn main() {
    // Conv-shaped GEMMs for a 64x64 canvas at a few widths:
    // (out_ch, in_ch*9, out_h*out_w)
    for &(m, k, n, reps, tag) in &[
        (16usize, 72usize, 1024usize, 2000usize, "enc1 ngf8 32x32"),
        (32, 144, 256, 4000, "enc2 ngf8 16x16"),
        (32, 288, 256, 2000, "res ngf8 16x16"),
        (64, 576, 256, 1000, "res ngf16 16x16"),
        (256, 256, 256, 1000, "square 256"),
    ] {
        let g32 = bench_f32(m, k, n, reps);
        let g64 = bench_f64(m, k, n, reps / 2);
        println!("{tag:18} m{m:4} k{k:4} n{n:5}  f32 {g32:6.2} GF/s   f64 {g64:6.2} GF/s");
    }
}
