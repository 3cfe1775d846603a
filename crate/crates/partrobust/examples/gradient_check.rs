//! Finite-difference gradient checking of the tensor primitives and a full
//! model forward pass.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use partrobust::diffcore::{check_gradients, Graph, Tensor, FD_STEP};
use partrobust::models::{init_params, model_forward, HeadKind, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    println!("== primitive gradients vs central differences (step {FD_STEP:e}) ==");
    let x = random_tensor(&mut rng, vec![2, 6, 6]);
    let k = random_tensor(&mut rng, vec![3, 2, 3, 3]);
    let b = random_tensor(&mut rng, vec![3]);
    let report = check_gradients(&[x, k, b], FD_STEP, |g, vs| {
        let y = g.conv2d(vs[0], vs[1], vs[2], 1, 1)?;
        let r = g.relu(y)?;
        g.mean(r)
    })
    .unwrap();
    println!(
        "conv2d+relu+mean: {} components, max rel err {:.2e}",
        report.checked, report.max_rel_err
    );

    let z = random_tensor(&mut rng, vec![4, 5, 5]);
    let report = check_gradients(&[z], FD_STEP, |g, vs| {
        let sm = g.softmax_channels(vs[0])?;
        let pooled = g.adaptive_avg_pool(sm, 2, 2)?;
        let ch = g.slice_channel(pooled, 1)?;
        g.sum(ch)
    })
    .unwrap();
    println!(
        "softmax+pool+slice: {} components, max rel err {:.2e}",
        report.checked, report.max_rel_err
    );

    println!("\n== end-to-end model gradient w.r.t. the input image ==");
    for head in [HeadKind::Downsampled, HeadKind::Bbox, HeadKind::Pixel] {
        let cfg = ModelConfig {
            classes: 3,
            parts: 2,
            height: 8,
            width: 8,
            head,
            pool: 2,
            width_base: 4,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg).unwrap();
        let image = Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|_| rng.gen_range(0.1..0.9)).collect(),
        )
        .unwrap();
        let report = check_gradients(&[image], FD_STEP, |g: &mut Graph, vs| {
            let bound = params.bind(g, false);
            let out = model_forward(g, vs[0], &bound, &cfg)?;
            g.cross_entropy(out.class_logits, 1)
        })
        .unwrap();
        println!(
            "{head:?}: {} pixels, max rel err {:.2e} -> {}",
            report.checked,
            report.max_rel_err,
            if report.passes(1e-5) { "PASS" } else { "FAIL" }
        );
    }
}
