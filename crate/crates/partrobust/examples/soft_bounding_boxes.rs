//! The differentiable soft bounding-box features: scores, centroids, and
//! spreads computed from mask logits, with the translation property shown
//! numerically.
//!
//! ```bash
//! cargo run --release --example soft_bounding_boxes
//! ```

use partrobust::diffcore::{Graph, Tensor};
use partrobust::partfeat::{bbox_features, SegLogits};

/// Logits whose part-1 softmax mass concentrates at one pixel (1-based).
fn point_mass(h: usize, w: usize, row: usize, col: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![3, h, w]);
    for v in t.data_mut()[..h * w].iter_mut() {
        *v = 60.0; // background dominates everywhere else
    }
    t.data_mut()[h * w + (row - 1) * w + (col - 1)] = 120.0;
    t
}

fn features_of(t: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let logits = g.leaf(t.clone(), false);
    let seg = SegLogits::new(&g, logits, 2).unwrap();
    let v = bbox_features(&mut g, seg).unwrap();
    g.value(v).data().to_vec()
}

fn main() {
    let (h, w) = (9, 9);
    println!("9x9 masks, part 1 concentrated at single pixels:");
    for (row, col) in [(5, 5), (1, 1), (5, 8)] {
        let v = features_of(&point_mass(h, w, row, col));
        println!(
            "  pixel ({row},{col}): s {:+.3}  centroid ({:+.3}, {:+.3})  spread ({:.3}, {:.3})",
            v[0], v[1], v[2], v[3], v[4]
        );
    }

    println!("\ntranslation moves the centroid, leaves the spread:");
    let a = features_of(&point_mass(h, w, 3, 3));
    let b = features_of(&point_mass(h, w, 6, 7));
    println!(
        "  delta centroid = ({:+.4}, {:+.4}), delta spread = ({:+.1e}, {:+.1e})",
        b[1] - a[1],
        b[2] - a[2],
        b[3] - a[3],
        b[4] - a[4]
    );

    println!("\ntwo-point mass split across rows 2 and 6 (same column):");
    let mut t = Tensor::zeros(vec![3, h, w]);
    for v in t.data_mut()[..h * w].iter_mut() {
        *v = 60.0;
    }
    t.data_mut()[h * w + w + 4] = 120.0; // row 2
    t.data_mut()[h * w + 5 * w + 4] = 120.0; // row 6
    let v = features_of(&t);
    println!(
        "  centroid row {:.3} (midpoint), spread row {:.3} (half the gap, normalized)",
        v[1], v[3]
    );
}
