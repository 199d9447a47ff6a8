use std::sync::Arc;

use super::{neighborhood, project_coord, AttnMask, Extent};
use crate::error::{Error, Result};
use crate::tensor::{Dims3, Matrix, Tape, Tensor4, Var};

/// Query/key/value projections, each `d_in x d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub heads: usize,
}

impl ProjWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, heads: usize) -> Result<Self> {
        if w_q.shape() != w_k.shape() || w_q.shape() != w_v.shape() {
            return Err(Error::shape(
                "ProjWeights",
                format!("W_Q {}", w_q.shape_str()),
                format!("W_K {}, W_V {}", w_k.shape_str(), w_v.shape_str()),
            ));
        }
        if heads == 0 || w_q.cols() % heads != 0 {
            return Err(Error::contract(format!(
                "{heads} heads do not divide d_out = {}",
                w_q.cols()
            )));
        }
        Ok(ProjWeights { w_q, w_k, w_v, heads })
    }

    pub fn d_in(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w_q.cols()
    }

    fn register(&self, tape: &mut Tape) -> AttnVars {
        AttnVars {
            w_q: tape.constant(self.w_q.clone()),
            w_k: tape.constant(self.w_k.clone()),
            w_v: tape.constant(self.w_v.clone()),
        }
    }
}

/// Tape handles for one attention's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Score scale: `1/sqrt(d_in)` for a single head, `1/sqrt(d_out/heads)` when split.
pub fn attention_scale(d_in: usize, d_out: usize, heads: usize) -> f64 {
    if heads <= 1 {
        1.0 / (d_in as f64).sqrt()
    } else {
        1.0 / ((d_out / heads) as f64).sqrt()
    }
}

/// Nearby key lists for the first `n_queries` target positions.
pub fn nearby_neighbors(
    target: Dims3,
    cond: Dims3,
    extent: Extent,
    causal: bool,
    n_queries: usize,
) -> Result<Arc<Vec<Vec<usize>>>> {
    if causal && target != cond {
        return Err(Error::contract(format!(
            "causal attention needs identical target and condition dims, got {target} and {cond}"
        )));
    }
    if n_queries > target.len() {
        return Err(Error::Index {
            what: "query prefix",
            index: n_queries,
            bound: target.len(),
        });
    }
    let mut lists = Vec::with_capacity(n_queries);
    for t in 0..n_queries {
        let center = project_coord(target, cond, target.unflat(t))?;
        let mut keys = neighborhood(cond, center, extent);
        if causal {
            keys.retain(|&u| u <= t);
        }
        lists.push(keys);
    }
    Ok(Arc::new(lists))
}

fn check_widths(tape: &Tape, x: Var, c: Var, w: &AttnVars) -> Result<(usize, usize)> {
    let (xm, cm, wq) = (tape.value(x), tape.value(c), tape.value(w.w_q));
    if xm.cols() != wq.rows() || cm.cols() != wq.rows() {
        return Err(Error::shape(
            "3d attention",
            format!("X {} / C {}", xm.shape_str(), cm.shape_str()),
            format!("W_Q {}", wq.shape_str()),
        ));
    }
    Ok((wq.rows(), wq.cols()))
}

/// Gathered sparse attention on the tape: query row `t` of `x` attends to the
/// rows of `c` listed in `neighbors[t]`.
pub fn sparse_attention(
    tape: &mut Tape,
    x: Var,
    c: Var,
    w: AttnVars,
    neighbors: Arc<Vec<Vec<usize>>>,
    heads: usize,
) -> Result<Var> {
    let (d_in, d_out) = check_widths(tape, x, c, &w)?;
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(c, w.w_k)?;
    let v = tape.matmul(c, w.w_v)?;
    tape.gathered_attention(q, k, v, neighbors, heads, attention_scale(d_in, d_out, heads))
}

/// Dense attention with `-inf` at masked scores. `x` and `c` may be prefixes of
/// the mask's query and key sets; the top-left block of `mask` is used.
pub fn dense_attention(tape: &mut Tape, x: Var, c: Var, w: AttnVars, mask: &AttnMask, heads: usize) -> Result<Var> {
    let (d_in, d_out) = check_widths(tape, x, c, &w)?;
    let (nq, nk) = (tape.value(x).rows(), tape.value(c).rows());
    if nq > mask.n_queries() || nk > mask.n_keys() {
        return Err(Error::shape(
            "dense_attention",
            format!("{nq} queries x {nk} keys"),
            format!("mask {}x{}", mask.n_queries(), mask.n_keys()),
        ));
    }
    if heads == 0 || d_out % heads != 0 {
        return Err(Error::contract(format!("{heads} heads do not divide d_out = {d_out}")));
    }
    let mut additive = Matrix::zeros(nq, nk);
    for t in 0..nq {
        let row = &mask.row(t)[..nk];
        if !row.iter().any(|b| *b) {
            return Err(Error::contract(format!("query {t} has no admissible keys")));
        }
        for (o, &b) in additive.row_mut(t).iter_mut().zip(row) {
            if !b {
                *o = f64::NEG_INFINITY;
            }
        }
    }
    let additive = tape.constant(additive);
    let scale = attention_scale(d_in, d_out, heads);
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(c, w.w_k)?;
    let v = tape.matmul(c, w.w_v)?;
    let dh = d_out / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, additive)?;
        let probs = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

fn check_tensors(x: &Tensor4, c: &Tensor4, weights: &ProjWeights) -> Result<()> {
    if x.width() != weights.d_in() || c.width() != weights.d_in() {
        return Err(Error::shape(
            "3d attention",
            format!("X width {} / C width {}", x.width(), c.width()),
            format!("d_in {}", weights.d_in()),
        ));
    }
    Ok(())
}

fn run(x: &Tensor4, c: &Tensor4, weights: &ProjWeights, parallel: bool, body: impl FnOnce(&mut Tape, Var, Var, AttnVars) -> Result<Var>) -> Result<Tensor4> {
    check_tensors(x, c, weights)?;
    let mut tape = Tape::new().with_parallel(parallel);
    let xv = tape.constant(x.to_matrix());
    let cv = tape.constant(c.to_matrix());
    let w = weights.register(&mut tape);
    let out = body(&mut tape, xv, cv, w)?;
    Tensor4::from_matrix(x.dims(), tape.value(out).clone())
}

/// 3D nearby attention of `x` over `c` (self-attention when `c` is `x`).
/// Output dims `(h, w, s, d_out)`.
pub fn attend_sparse(x: &Tensor4, c: &Tensor4, weights: &ProjWeights, extent: Extent, causal: bool) -> Result<Tensor4> {
    let nb = nearby_neighbors(x.dims(), c.dims(), extent, causal, x.dims().len())?;
    run(x, c, weights, false, |tape, xv, cv, w| sparse_attention(tape, xv, cv, w, nb, weights.heads))
}

/// Gathered attention over the keys selected by an arbitrary mask.
pub fn attend_gathered(x: &Tensor4, c: &Tensor4, weights: &ProjWeights, mask: &AttnMask, parallel: bool) -> Result<Tensor4> {
    check_mask_dims(x, c, mask)?;
    let nb = Arc::new(mask.neighbors());
    run(x, c, weights, parallel, |tape, xv, cv, w| sparse_attention(tape, xv, cv, w, nb, weights.heads))
}

/// Full `Q K^T` attention with masked entries set to `-inf` before the softmax.
pub fn attend_dense_masked(x: &Tensor4, c: &Tensor4, weights: &ProjWeights, mask: &AttnMask) -> Result<Tensor4> {
    check_mask_dims(x, c, mask)?;
    run(x, c, weights, false, |tape, xv, cv, w| dense_attention(tape, xv, cv, w, mask, weights.heads))
}

fn check_mask_dims(x: &Tensor4, c: &Tensor4, mask: &AttnMask) -> Result<()> {
    if mask.q_dims() != x.dims() || mask.k_dims() != c.dims() {
        return Err(Error::shape(
            "attention mask",
            format!("X {} / C {}", x.dims(), c.dims()),
            format!("mask {} x {}", mask.q_dims(), mask.k_dims()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{block_mask, full_mask, nearby_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tensor(rng: &mut ChaCha8Rng, dims: Dims3, d: usize) -> Tensor4 {
        Tensor4::from_matrix(dims, random(rng, dims.len(), d)).unwrap()
    }

    fn weights(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, heads: usize) -> ProjWeights {
        ProjWeights::new(
            random(rng, d_in, d_out),
            random(rng, d_in, d_out),
            random(rng, d_in, d_out),
            heads,
        )
        .unwrap()
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tensor(&mut rng, Dims3::new(1, 1, 1), 3);
        let w = weights(&mut rng, 3, 4, 1);
        let y = attend_sparse(&x, &x, &w, Extent::video(), true).unwrap();
        let expected = x.to_matrix().matmul(&w.w_v).unwrap();
        assert!(y.to_matrix().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn identical_keys_give_common_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tensor(&mut rng, Dims3::new(2, 2, 1), 3);
        let row = [0.3, -0.7, 1.1];
        let c = Tensor4::from_vec(Dims3::new(3, 3, 1), 3, row.repeat(9)).unwrap();
        let mut w = weights(&mut rng, 3, 3, 1);
        w.w_v = Matrix::identity(3);
        let y = attend_sparse(&x, &c, &w, Extent::image(), false).unwrap();
        for t in 0..4 {
            for (a, b) in y.data()[t * 3..(t + 1) * 3].iter().zip(row) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sparse_equals_dense_on_small_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let extents = [Extent::text(), Extent::image(), Extent::video(), Extent::all()];
        for dims in [Dims3::new(2, 2, 1), Dims3::new(3, 2, 2), Dims3::new(4, 4, 3)] {
            for extent in extents {
                for heads in [1, 2] {
                    let x = tensor(&mut rng, dims, 4);
                    let w = weights(&mut rng, 4, 4, heads);
                    let mask = nearby_mask(dims, dims, extent, true).unwrap();
                    let a = attend_sparse(&x, &x, &w, extent, true).unwrap();
                    let b = attend_dense_masked(&x, &x, &w, &mask).unwrap();
                    assert!(a.max_abs_diff(&b) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn all_true_mask_is_full_cross_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (qd, kd) = (Dims3::new(2, 2, 1), Dims3::new(1, 1, 3));
        let x = tensor(&mut rng, qd, 2);
        let c = tensor(&mut rng, kd, 2);
        let w = weights(&mut rng, 2, 2, 1);
        let y = attend_dense_masked(&x, &c, &w, &full_mask(qd, kd, false).unwrap()).unwrap();
        // direct softmax(Q K^T / sqrt(d)) V
        let q = x.to_matrix().matmul(&w.w_q).unwrap();
        let k = c.to_matrix().matmul(&w.w_k).unwrap();
        let v = c.to_matrix().matmul(&w.w_v).unwrap();
        for t in 0..4 {
            let scores: Vec<f64> = (0..3)
                .map(|u| (0..2).map(|e| q.get(t, e) * k.get(u, e)).sum::<f64>() / 2f64.sqrt())
                .collect();
            let p = crate::tensor::softmax_last(&scores).unwrap();
            for e in 0..2 {
                let o: f64 = (0..3).map(|u| p[u] * v.get(u, e)).sum();
                assert!((y.data()[t * 2 + e] - o).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn identity_mask_attends_to_own_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Dims3::new(2, 3, 2);
        let x = tensor(&mut rng, d, 3);
        let w = weights(&mut rng, 3, 3, 1);
        let y = attend_dense_masked(&x, &x, &w, &AttnMask::identity(d).unwrap()).unwrap();
        let expected = x.to_matrix().matmul(&w.w_v).unwrap();
        assert!(y.to_matrix().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn block_and_nearby_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Dims3::new(4, 4, 2);
        let x = tensor(&mut rng, d, 4);
        let w = weights(&mut rng, 4, 4, 1);
        let a = attend_dense_masked(&x, &x, &w, &nearby_mask(d, d, Extent::video(), false).unwrap()).unwrap();
        let b = attend_dense_masked(&x, &x, &w, &block_mask(d, Dims3::new(2, 2, 2), false).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn output_ignores_condition_outside_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (td, cd) = (Dims3::new(3, 3, 2), Dims3::new(4, 4, 2));
        let x = tensor(&mut rng, td, 3);
        let c = tensor(&mut rng, cd, 3);
        let w = weights(&mut rng, 3, 3, 1);
        let base = attend_sparse(&x, &c, &w, Extent::image(), false).unwrap();
        for t in 0..td.len() {
            let center = project_coord(td, cd, td.unflat(t)).unwrap();
            let inside = neighborhood(cd, center, Extent::image());
            let mut c2 = c.clone();
            for u in 0..cd.len() {
                if !inside.contains(&u) {
                    for v in &mut c2.data_mut()[u * 3..(u + 1) * 3] {
                        *v = rng.gen_range(-5.0..5.0);
                    }
                }
            }
            let y = attend_sparse(&x, &c2, &w, Extent::image(), false).unwrap();
            assert_eq!(&y.data()[t * 3..(t + 1) * 3], &base.data()[t * 3..(t + 1) * 3]);
        }
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Dims3::new(2, 2, 1);
        let x = tensor(&mut rng, d, 3);
        let c = tensor(&mut rng, d, 2);
        let w = weights(&mut rng, 3, 3, 1);
        assert!(matches!(attend_sparse(&x, &c, &w, Extent::image(), false), Err(Error::Shape { .. })));
        let c = tensor(&mut rng, Dims3::new(1, 1, 1), 3);
        assert!(matches!(attend_sparse(&x, &c, &w, Extent::image(), true), Err(Error::Contract(_))));
        let empty = AttnMask::from_fn(d, d, |t, _| t != 1).unwrap();
        assert!(matches!(attend_dense_masked(&x, &x, &w, &empty), Err(Error::Contract(_))));
        assert!(ProjWeights::new(Matrix::zeros(3, 3), Matrix::zeros(3, 3), Matrix::zeros(3, 3), 2).is_err());
    }

    #[test]
    fn parallel_gathered_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Dims3::new(4, 4, 3);
        let x = tensor(&mut rng, d, 4);
        let w = weights(&mut rng, 4, 4, 2);
        let mask = nearby_mask(d, d, Extent::video(), true).unwrap();
        let a = attend_gathered(&x, &x, &w, &mask, true).unwrap();
        let b = attend_gathered(&x, &x, &w, &mask, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, attend_sparse(&x, &x, &w, Extent::video(), true).unwrap());
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = Dims3::new(3, 3, 2);
        let x = tensor(&mut rng, d, 2);
        // W_V maps every input to the constant 1 in column 0 through a bias-free
        // trick: use a value matrix and inputs with a constant column.
        let mut xc = x.clone();
        for t in 0..d.len() {
            xc.data_mut()[t * 2] = 1.0;
        }
        let mut w = weights(&mut rng, 2, 2, 1);
        w.w_v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let y = attend_sparse(&xc, &xc, &w, Extent::video(), false).unwrap();
        for t in 0..d.len() {
            assert!((y.data()[t * 2] - 1.0).abs() < 1e-12);
        }
    }
}
