use partrobust::diffcore::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn rt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap()
}

#[test]
fn bench_conv_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Representative: the widest layer of a w=16 segmenter (bottleneck 64ch @ 8x8
    // and the 32->16 conv @ 16x16), plus the full 6-conv stack fwd+bwd.
    let x = rt(&mut rng, vec![3, 32, 32]);
    let setups = [
        (3usize, 16usize, 32usize, 1usize), // enc1 @32
        (16, 32, 16, 1),                    // 16x16
        (32, 64, 8, 1),                     // 8x8
        (64, 64, 8, 1),                     // bottleneck
    ];
    let _ = x;
    for (cin, cout, hw, stride) in setups {
        let xi = rt(&mut rng, vec![cin, hw, hw]);
        let k = rt(&mut rng, vec![cout, cin, 3, 3]);
        let b = rt(&mut rng, vec![cout]);
        let iters = 200;
        let t0 = Instant::now();
        let mut acc = 0.0;
        for _ in 0..iters {
            let mut g = Graph::new();
            let xv = g.leaf(xi.clone(), true);
            let kv = g.leaf(k.clone(), true);
            let bv = g.leaf(b.clone(), true);
            let y = g.conv2d(xv, kv, bv, stride, 1).unwrap();
            let s = g.mean(y).unwrap();
            g.backward(s).unwrap();
            acc += g.grad(kv).unwrap().data()[0];
        }
        let dt = t0.elapsed().as_secs_f64();
        let oh = hw; // stride 1 pad 1
        let flops_fwd = 2.0 * (cout * cin * 9 * oh * oh) as f64;
        let total = (flops_fwd * 3.0) * iters as f64; // fwd + dX + dK roughly
        println!(
            "conv {cin}->{cout} @{hw}: {:.1} ms/iter, ~{:.2} GFLOP/s (acc {acc:.3e})",
            dt * 1000.0 / iters as f64,
            total / dt / 1e9
        );
    }
}
