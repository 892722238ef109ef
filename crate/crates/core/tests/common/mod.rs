//! Shared test oracles: central finite differences against the tape.

use plm_core::tape::{NodeId, Tape};

pub const FD_H: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Central finite-difference check of every coordinate of every leaf
/// against the tape's backward pass. Returns the largest relative error
/// seen. The oracle never touches the backward code path: it only
/// re-evaluates the forward build with perturbed leaf values.
pub fn fd_max_rel_error(
    leaves: &[(Vec<usize>, Vec<f64>)],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> f64 {
    let eval = |datas: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves
            .iter()
            .zip(datas)
            .map(|((shape, _), data)| tape.leaf(shape.clone(), data.clone(), false).unwrap())
            .collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss)[0]
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|(shape, data)| tape.leaf(shape.clone(), data.clone(), true).unwrap())
        .collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).len(), 1, "fd check needs a scalar loss");
    let grads = tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = leaves.iter().map(|(_, d)| d.clone()).collect();
    let mut worst = 0.0f64;
    for (li, (_, data)) in leaves.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(ids[li])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; data.len()]);
        for ci in 0..data.len() {
            let mut plus = base.clone();
            plus[li][ci] += FD_H;
            let mut minus = base.clone();
            minus[li][ci] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let ad = analytic[ci];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            let rel = (ad - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
