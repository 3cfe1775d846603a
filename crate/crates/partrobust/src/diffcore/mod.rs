//! Dense-tensor forward primitives with reverse-mode gradients, SGD, and a
//! cosine learning-rate schedule.
//!
//! Everything runs in 64-bit floats. The primitive set is closed: besides
//! the tensor ops named in the builder API there is nothing hidden — every
//! network in this crate is a composition of these ops, so the
//! finite-difference harness in [`gradcheck`] covers the whole model space.
//!
//! Conventions worth knowing:
//! - `conv2d` is cross-correlation (no kernel flip), the usual deep-learning
//!   orientation.
//! - `relu` and `sqrt` take derivative 0 at their kink.
//! - Every primitive checks its output for NaN/Inf and errors out rather
//!   than letting poison spread.

mod gradcheck;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, FD_STEP};
pub use graph::{Graph, Var};
pub use ops::{pool_window, Op};
pub use optim::{cosine_lr, sgd_step};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Independent quadruple-loop cross-correlation, the oracle for conv2d.
    fn conv_oracle(
        x: &Tensor,
        k: &Tensor,
        b: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for dkh in 0..kh {
                            for dkw in 0..kw {
                                let ir = (r * stride + dkh) as i64 - padding as i64;
                                let ic = (c * stride + dkw) as i64 - padding as i64;
                                if ir >= 0 && ic >= 0 && (ir as usize) < h && (ic as usize) < w {
                                    acc += k.data()[((co * cin + ci) * kh + dkh) * kw + dkw]
                                        * x.data()[ci * h * w + ir as usize * w + ic as usize];
                                }
                            }
                        }
                    }
                    out[co * oh * ow + r * ow + c] = acc;
                }
            }
        }
        Tensor::new(vec![cout, oh, ow], out).unwrap()
    }

    fn run_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Tensor {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let kv = g.leaf(k.clone(), false);
        let bv = g.leaf(b.clone(), false);
        let out = g.conv2d(xv, kv, bv, stride, padding).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, vec![1, 4, 4]);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let out = run_conv(&x, &k, &b, 1, 0);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn conv_all_ones_on_constant_field() {
        let c = 0.37;
        let x = Tensor::full(vec![1, 5, 5], c);
        let k = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(vec![1]);
        let out = run_conv(&x, &k, &b, 1, 0);
        assert_eq!(out.shape(), &[1, 3, 3]);
        for &v in out.data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
            let x = random_tensor(&mut rng, vec![2, 5, 5]);
            let k = random_tensor(&mut rng, vec![3, 2, 3, 3]);
            let b = random_tensor(&mut rng, vec![3]);
            let got = run_conv(&x, &k, &b, stride, padding);
            let want = conv_oracle(&x, &k, &b, stride, padding);
            assert_eq!(got.shape(), want.shape());
            assert!(
                got.max_abs_diff(&want) < 1e-12,
                "stride {stride} pad {padding}: diff {}",
                got.max_abs_diff(&want)
            );
        }
    }

    #[test]
    fn conv_rejects_inexact_output_extent() {
        let x = Tensor::zeros(vec![1, 5, 5]);
        let k = Tensor::zeros(vec![1, 1, 3, 3]);
        let b = Tensor::zeros(vec![1]);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let kv = g.leaf(k, false);
        let bv = g.leaf(b, false);
        // (5 - 3) = 2 not divisible by stride 4
        assert!(g.conv2d(xv, kv, bv, 4, 0).is_err());
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3, 2, 2]), false);
        let s = g.softmax_channels(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_case() {
        let ln2 = std::f64::consts::LN_2;
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2, 1, 1], vec![ln2, 0.0]).unwrap(), false)
            .to_owned();
        let s = g.softmax_channels(x).unwrap();
        let out = g.value(s).data();
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, vec![4, 3, 3]);
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            *v += 7.3;
        }
        let mut g = Graph::new();
        let a = g.leaf(x, false);
        let b = g.leaf(shifted, false);
        let sa = g.softmax_channels(a).unwrap();
        let sb = g.softmax_channels(b).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }

    #[test]
    fn pool_constant_field() {
        let x = Tensor::full(vec![2, 6, 5], 3.0);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let p = g.adaptive_avg_pool(xv, 4, 2).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_global_mean() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let p = g.adaptive_avg_pool(xv, 1, 1).unwrap();
        assert!((g.value(p).data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn pool_window_formula_three_rows_to_two() {
        // Rows [1,2,3]: windows [0,2) and [1,3) give means 1.5 and 2.5.
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let p = g.adaptive_avg_pool(xv, 2, 1).unwrap();
        let out = g.value(p).data();
        assert!((out[0] - 1.5).abs() < 1e-15);
        assert!((out[1] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn pool_rejects_oversized_output() {
        let x = Tensor::zeros(vec![1, 3, 3]);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        assert!(g.adaptive_avg_pool(xv, 4, 1).is_err());
    }

    #[test]
    fn cross_entropy_confident_and_uniform() {
        let mut g = Graph::new();
        let confident = g.leaf(Tensor::from_vec(vec![-50.0, 50.0, -50.0]), false);
        let loss = g.cross_entropy(confident, 1).unwrap();
        assert!(g.value(loss).item() < 1e-10);

        let uniform = g.leaf(Tensor::zeros(vec![7]), false);
        let loss = g.cross_entropy(uniform, 3).unwrap();
        assert!((g.value(loss).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let z = random_tensor(&mut rng, vec![5]);
            let target = rng.gen_range(0..5);
            let mut g = Graph::new();
            let zv = g.leaf(z.clone(), false);
            let loss = g.cross_entropy(zv, target).unwrap();
            // Direct softmax-then-log oracle.
            let denom: f64 = z.data().iter().map(|v| v.exp()).sum();
            let want = -(z.data()[target].exp() / denom).ln();
            assert!((g.value(loss).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(vec![3]), false);
        assert!(g.cross_entropy(z, 3).is_err());
    }

    #[test]
    fn kl_zero_for_identical_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_tensor(&mut rng, vec![6]);
        let mut g = Graph::new();
        let p = g.leaf(z.clone(), false);
        let q = g.leaf(z, false);
        let kl = g.kl_divergence(p, q).unwrap();
        assert!(g.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn kl_point_mass_vs_uniform_is_ln2() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(vec![50.0, -50.0]), false);
        let q = g.leaf(Tensor::zeros(vec![2]), false);
        let kl = g.kl_divergence(p, q).unwrap();
        assert!((g.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn kl_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let zp = random_tensor(&mut rng, vec![4]);
            let zq = random_tensor(&mut rng, vec![4]);
            let mut g = Graph::new();
            let pv = g.leaf(zp.clone(), false);
            let qv = g.leaf(zq.clone(), false);
            let kl = g.kl_divergence(pv, qv).unwrap();
            // Direct sum p * (log p - log q).
            let dp: f64 = zp.data().iter().map(|v| v.exp()).sum();
            let dq: f64 = zq.data().iter().map(|v| v.exp()).sum();
            let want: f64 = zp
                .data()
                .iter()
                .zip(zq.data())
                .map(|(&a, &b)| {
                    let p = a.exp() / dp;
                    let q = b.exp() / dq;
                    p * (p.ln() - q.ln())
                })
                .sum();
            assert!((g.value(kl).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pixelwise_ce_matches_per_pixel_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, h, w) = (4, 3, 3);
        let z = random_tensor(&mut rng, vec![c, h, w]);
        let targets: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c as u8)).collect();

        let mut g = Graph::new();
        let zv = g.leaf(z.clone(), false);
        let loss = g
            .pixelwise_cross_entropy(zv, Arc::new(targets.clone()))
            .unwrap();

        // Oracle: average of per-pixel cross_entropy primitives.
        let mut total = 0.0;
        for p in 0..h * w {
            let logits: Vec<f64> = (0..c).map(|ch| z.data()[ch * h * w + p]).collect();
            let mut og = Graph::new();
            let lv = og.leaf(Tensor::from_vec(logits), false);
            let l = og.cross_entropy(lv, targets[p] as usize).unwrap();
            total += og.value(l).item();
        }
        let want = total / (h * w) as f64;
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_of_all_primitives_pass_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, vec![2, 4, 4]);
        let k = random_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b = random_tensor(&mut rng, vec![3]);
        let report = check_gradients(&[x, k, b], FD_STEP, |g, vs| {
            let y = g.conv2d(vs[0], vs[1], vs[2], 1, 1)?;
            let r = g.relu(y)?;
            g.mean(r)
        })
        .unwrap();
        assert!(report.passes(1e-6), "conv rel err {}", report.max_rel_err);

        let p = random_tensor(&mut rng, vec![5]);
        let q = random_tensor(&mut rng, vec![5]);
        let report = check_gradients(&[p, q], FD_STEP, |g, vs| g.kl_divergence(vs[0], vs[1])).unwrap();
        assert!(report.passes(1e-6), "kl rel err {}", report.max_rel_err);

        let z = random_tensor(&mut rng, vec![3, 4, 4]);
        let targets: Arc<Vec<u8>> = Arc::new((0..16).map(|i| (i % 3) as u8).collect());
        let report = check_gradients(&[z], FD_STEP, move |g, vs| {
            g.pixelwise_cross_entropy(vs[0], targets.clone())
        })
        .unwrap();
        assert!(report.passes(1e-6), "pce rel err {}", report.max_rel_err);

        let x = random_tensor(&mut rng, vec![2, 4, 4]);
        let report = check_gradients(&[x], FD_STEP, |g, vs| {
            let up = g.upsample2x(vs[0])?;
            let pooled = g.adaptive_avg_pool(up, 3, 3)?;
            let sg = g.sigmoid(pooled)?;
            g.sum(sg)
        })
        .unwrap();
        assert!(report.passes(1e-6), "up/pool rel err {}", report.max_rel_err);
    }
}
