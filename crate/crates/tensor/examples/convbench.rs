use e2v_tensor::{conv, Tensor};
use std::time::Instant;
fn main() {
    for &(cin, cout, h, k, s) in &[(128usize, 256usize, 16usize, 3usize, 1usize), (64, 128, 32, 3, 1), (96, 32, 32, 5, 1), (48, 16, 64, 5, 1), (48,16,64,3,1), (5,16,64,5,1)] {
        let x = Tensor::<f32>::from_fn(&[1, cin, h, h], |i| (i % 7) as f32 * 0.1);
        let w = Tensor::<f32>::from_fn(&[cout, cin, k, k], |i| (i % 5) as f32 * 0.01);
        let t = Instant::now();
        let reps = 20;
        for _ in 0..reps { let y = conv::conv2d_forward(&x, &w, None, s, k / 2); std::hint::black_box(y); }
        let fwd = t.elapsed().as_secs_f64() / reps as f64;
        let y = conv::conv2d_forward(&x, &w, None, s, k / 2);
        let t = Instant::now();
        for _ in 0..reps { let g = conv::conv2d_backward(&x, &w, &y, s, k / 2, (true, true, true)); std::hint::black_box(g.dx); }
        let bwd = t.elapsed().as_secs_f64() / reps as f64;
        let macs = (cout * cin * k * k * (h / s) * (h / s)) as f64;
        println!("cin {cin} cout {cout} h {h} k {k}: fwd {:.2} ms ({:.1} GFLOPS) bwd {:.2} ms ({:.1} GFLOPS)", fwd * 1e3, 2.0 * macs / fwd / 1e9, bwd * 1e3, 4.0 * macs / bwd / 1e9);
    }
}
