use e2v_core::net::{Model, ModelConfig};
use e2v_tensor::{Graph, Tensor};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    println!("params: {}", model.num_parameters());
    for rep in 0..2 {
        let t = Instant::now();
        let mut g = Graph::new();
        let mut state = model.fresh_state(batch, 64, 64).bind(&mut g);
        let mut prev = g.input(Tensor::zeros(&[batch, 1, 64, 64]));
        let mut loss = None;
        for s in 0..steps {
            let v = g.input(Tensor::from_fn(&[batch, 5, 64, 64], |i| ((i * 7 + s) % 13) as f32 / 13.0 - 0.5));
            let out = model.step(&mut g, v, prev, &mut state, true).unwrap();
            let m = g.mean(out.frame);
            loss = Some(match loss {
                None => m,
                Some(l) => g.add(l, m),
            });
            prev = g.detach(out.frame);
        }
        let fwd = t.elapsed();
        let grads = g.backward(loss.unwrap());
        let pg = g.param_grads(&grads, &model.params);
        let total = t.elapsed();
        println!(
            "rep {rep}: fwd {:.1} ms/frame, total {:.1} ms/frame, nodes {}, grads {}",
            fwd.as_secs_f64() * 1e3 / (steps * batch) as f64,
            total.as_secs_f64() * 1e3 / (steps * batch) as f64,
            g.len(),
            pg.iter().flatten().count()
        );
    }
}
