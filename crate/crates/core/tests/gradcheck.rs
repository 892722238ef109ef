//! Randomized finite-difference checks for every differentiable
//! operation, on small random shapes.

mod common;

use common::{fd_max_rel_error, FD_REL_TOL};
use plm_core::rng::substream;
use plm_core::tape::{NodeId, Tape};
use plm_core::trainer::{corrected_risk, reweighted_risk};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from the relu kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(-2.0..2.0);
            while v.abs() < 1e-3 {
                v = rng.random_range(-2.0..2.0);
            }
            v
        })
        .collect()
}

fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
        out.extend(row);
    }
    out
}

fn check(leaves: &[(Vec<usize>, Vec<f64>)], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let worst = fd_max_rel_error(leaves, build);
    assert!(
        worst < FD_REL_TOL,
        "finite-difference mismatch: max relative error {worst:.3e}"
    );
}

#[test]
fn elementwise_and_reduction_ops() {
    let mut rng = substream(101, "gradcheck");
    for _ in 0..100 {
        let n = rng.random_range(2..8);
        let a = away_from_zero(&mut rng, n);
        let b: Vec<f64> = (0..n)
            .map(|_| {
                let mut v: f64 = rng.random_range(-2.0..2.0);
                while v.abs() < 0.2 {
                    v = rng.random_range(-2.0..2.0);
                }
                v
            })
            .collect();
        let c = uniform(&mut rng, n, -1.5, 1.5);
        let leaves = vec![
            (vec![n], a.clone()),
            (vec![n], b.clone()),
            (vec![n], c.clone()),
        ];
        check(&leaves, &|tape, ids| {
            let s = tape.add(ids[0], ids[1]).unwrap();
            let m = tape.mul(s, ids[2]).unwrap();
            let d = tape.div(m, ids[1]).unwrap();
            let sc = tape.scale(d, 0.7);
            let r = tape.relu(sc);
            tape.mean_all(r).unwrap()
        });
        // clamp_min away from its floor
        let floor = -0.5;
        let shifted: Vec<f64> = a.iter().map(|v| v + 0.8).collect();
        check(&[(vec![n], shifted)], &|tape, ids| {
            let cm = tape.clamp_min(ids[0], floor);
            tape.mean_all(cm).unwrap()
        });
    }
}

#[test]
fn activation_ops() {
    let mut rng = substream(102, "gradcheck");
    for _ in 0..100 {
        let rows = rng.random_range(1..4);
        let cols = rng.random_range(2..6);
        let x = uniform(&mut rng, rows * cols, -3.0, 3.0);
        let c = uniform(&mut rng, rows * cols, -1.0, 1.0);
        let leaves = vec![
            (vec![rows, cols], x.clone()),
            (vec![rows, cols], c.clone()),
        ];
        check(&leaves, &|tape, ids| {
            let s = tape.softmax_rows(ids[0]).unwrap();
            let m = tape.mul(s, ids[1]).unwrap();
            tape.mean_all(m).unwrap()
        });
        check(&leaves, &|tape, ids| {
            let s = tape.sigmoid(ids[0]);
            let m = tape.mul(s, ids[1]).unwrap();
            tape.mean_all(m).unwrap()
        });
        // log over safely interior probabilities
        let p = uniform(&mut rng, rows * cols, 0.05, 0.95);
        check(&[(vec![rows, cols], p)], &|tape, ids| {
            let l = tape.log_clamped(ids[0]);
            tape.mean_all(l).unwrap()
        });
    }
}

#[test]
fn linear_algebra_ops() {
    let mut rng = substream(103, "gradcheck");
    for _ in 0..100 {
        let m = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..4);
        let a = uniform(&mut rng, m * k, -1.5, 1.5);
        let b = uniform(&mut rng, k * n, -1.5, 1.5);
        let c = uniform(&mut rng, m * n, -1.0, 1.0);
        let bias = uniform(&mut rng, n, -0.5, 0.5);
        let leaves = vec![
            (vec![m, k], a),
            (vec![k, n], b),
            (vec![m, n], c),
            (vec![n], bias),
        ];
        check(&leaves, &|tape, ids| {
            let mm = tape.matmul(ids[0], ids[1]).unwrap();
            let ab = tape.add_bias(mm, ids[3]).unwrap();
            let w = tape.mul(ab, ids[2]).unwrap();
            tape.mean_all(w).unwrap()
        });

        // batched vector-matrix product
        let classes = rng.random_range(2..5);
        let p = simplex_rows(&mut rng, m, classes);
        let u = uniform(&mut rng, m * classes * classes, 0.05, 0.95);
        let w = uniform(&mut rng, m * classes, -1.0, 1.0);
        let leaves = vec![
            (vec![m, classes], p),
            (vec![m, classes * classes], u),
            (vec![m, classes], w),
        ];
        check(&leaves, &|tape, ids| {
            let q = tape.batched_vecmat(ids[0], ids[1]).unwrap();
            let mw = tape.mul(q, ids[2]).unwrap();
            tape.mean_all(mw).unwrap()
        });
    }
}

#[test]
fn loss_ops() {
    let mut rng = substream(104, "gradcheck");
    for _ in 0..100 {
        let rows = rng.random_range(1..4);
        let cols = rng.random_range(2..6);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..cols)).collect();
        let targets: Vec<f64> = (0..rows * cols)
            .map(|_| f64::from(rng.random_range(0..2u32)))
            .collect();

        // cross entropy straight on interior simplex rows
        let p = simplex_rows(&mut rng, rows, cols);
        let lab = labels.clone();
        check(&[(vec![rows, cols], p.clone())], &|tape, ids| {
            tape.cross_entropy_mean(ids[0], &lab).unwrap()
        });

        // binary cross entropy on interior probabilities
        let pb = uniform(&mut rng, rows * cols, 0.05, 0.95);
        let tg = targets.clone();
        check(&[(vec![rows, cols], pb)], &|tape, ids| {
            tape.bce_mean(ids[0], &tg).unwrap()
        });

        // gather-then-log path used by the reweighted risk
        let p2 = simplex_rows(&mut rng, rows, cols);
        let lab2 = labels.clone();
        check(&[(vec![rows, cols], p2)], &|tape, ids| {
            let g = tape.gather_class(ids[0], &lab2).unwrap();
            let l = tape.log_clamped(g);
            let n = tape.scale(l, -1.0);
            tape.mean_all(n).unwrap()
        });

        // softmax composed with cross entropy, the standard training head
        let logits = uniform(&mut rng, rows * cols, -2.0, 2.0);
        let lab3 = labels.clone();
        check(&[(vec![rows, cols], logits)], &|tape, ids| {
            let s = tape.softmax_rows(ids[0]).unwrap();
            tape.cross_entropy_mean(s, &lab3).unwrap()
        });
    }
}

#[test]
fn two_layer_network_with_cross_entropy() {
    let mut rng = substream(105, "gradcheck");
    for _ in 0..40 {
        let batch = rng.random_range(1..4);
        let (d_in, d_h, d_out) = (
            rng.random_range(2..5),
            rng.random_range(2..5),
            rng.random_range(2..4),
        );
        let x = uniform(&mut rng, batch * d_in, -1.0, 1.0);
        let w1 = uniform(&mut rng, d_in * d_h, -0.8, 0.8);
        let b1 = uniform(&mut rng, d_h, -0.3, 0.3);
        let w2 = uniform(&mut rng, d_h * d_out, -0.8, 0.8);
        let b2 = uniform(&mut rng, d_out, -0.3, 0.3);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..d_out)).collect();
        let leaves = vec![
            (vec![batch, d_in], x),
            (vec![d_in, d_h], w1),
            (vec![d_h], b1),
            (vec![d_h, d_out], w2),
            (vec![d_out], b2),
        ];
        let lab = labels.clone();
        check(&leaves, &|tape, ids| {
            let h = tape.matmul(ids[0], ids[1]).unwrap();
            let h = tape.add_bias(h, ids[2]).unwrap();
            let h = tape.relu(h);
            let o = tape.matmul(h, ids[3]).unwrap();
            let o = tape.add_bias(o, ids[4]).unwrap();
            let s = tape.softmax_rows(o).unwrap();
            tape.cross_entropy_mean(s, &lab).unwrap()
        });
    }
}

#[test]
fn composed_risks_used_by_training() {
    let mut rng = substream(106, "gradcheck");
    for _ in 0..40 {
        let batch = rng.random_range(1..3);
        let c = rng.random_range(2..4);
        let logits = uniform(&mut rng, batch * c, -2.0, 2.0);
        let t = simplex_rows(&mut rng, c, c);
        let u = uniform(&mut rng, batch * c * c, 0.1, 0.9);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..c)).collect();
        let part: Vec<f64> = (0..batch * c)
            .map(|_| f64::from(rng.random_range(0..2u32)))
            .collect();
        let slack = uniform(&mut rng, c * c, -0.05, 0.05);

        let leaves = vec![
            (vec![batch, c], logits.clone()),
            (vec![c, c], t.clone()),
            (vec![batch, c * c], u.clone()),
        ];
        let (lab, pt) = (labels.clone(), part.clone());
        check(&leaves, &|tape, ids| {
            let probs = tape.softmax_rows(ids[0]).unwrap();
            corrected_risk(tape, probs, ids[1], ids[2], &lab, &pt).unwrap()
        });

        let leaves = vec![
            (vec![batch, c], logits.clone()),
            (vec![c, c], t.clone()),
            (vec![c, c], slack),
            (vec![batch, c * c], u),
        ];
        let (lab, pt) = (labels.clone(), part.clone());
        check(&leaves, &|tape, ids| {
            let probs = tape.softmax_rows(ids[0]).unwrap();
            let (loss, _) =
                reweighted_risk(tape, probs, ids[1], Some(ids[2]), ids[3], &lab, &pt).unwrap();
            loss
        });
    }
}
