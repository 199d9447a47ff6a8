use std::fmt::Write as _;

use super::{neighborhood, project_coord, Extent};
use crate::error::{Error, Result};
use crate::tensor::Dims3;

/// Boolean query x key matrix over canonically flattened positions.
/// `true` means the pair attends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    q_dims: Dims3,
    k_dims: Dims3,
    bits: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(q_dims: Dims3, k_dims: Dims3, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        q_dims.check_nonzero("mask query")?;
        k_dims.check_nonzero("mask key")?;
        let (nq, nk) = (q_dims.len(), k_dims.len());
        let mut bits = Vec::with_capacity(nq * nk);
        for t in 0..nq {
            for u in 0..nk {
                bits.push(f(t, u));
            }
        }
        Ok(AttnMask { q_dims, k_dims, bits })
    }

    pub fn identity(dims: Dims3) -> Result<Self> {
        AttnMask::from_fn(dims, dims, |t, u| t == u)
    }

    pub fn q_dims(&self) -> Dims3 {
        self.q_dims
    }

    pub fn k_dims(&self) -> Dims3 {
        self.k_dims
    }

    pub fn n_queries(&self) -> usize {
        self.q_dims.len()
    }

    pub fn n_keys(&self) -> usize {
        self.k_dims.len()
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize) -> bool {
        self.bits[t * self.k_dims.len() + u]
    }

    pub fn row(&self, t: usize) -> &[bool] {
        let nk = self.k_dims.len();
        &self.bits[t * nk..(t + 1) * nk]
    }

    /// Number of attending pairs.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// True if every bit set here is also set in `other`.
    pub fn is_subset_of(&self, other: &AttnMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Attending key indices per query, ascending.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        (0..self.n_queries())
            .map(|t| {
                self.row(t)
                    .iter()
                    .enumerate()
                    .filter_map(|(u, &b)| b.then_some(u))
                    .collect()
            })
            .collect()
    }

    /// Binary PGM (`P5`): one pixel per pair, 0 = attend, 255 = masked.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.n_keys(), self.n_queries()).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 0u8 } else { 255u8 }));
        out
    }

    /// `flat_q,flat_k` rows for every attending pair, canonical order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("flat_q,flat_k\n");
        for t in 0..self.n_queries() {
            for (u, &b) in self.row(t).iter().enumerate() {
                if b {
                    let _ = writeln!(out, "{t},{u}");
                }
            }
        }
        out
    }
}

fn check_causal(q: Dims3, k: Dims3, causal: bool) -> Result<()> {
    if causal && q != k {
        return Err(Error::contract(format!(
            "causal masking needs identical query and key dims, got {q} and {k}"
        )));
    }
    Ok(())
}

/// 3D nearby mask: key `u` attends iff it lies in the window around the query's
/// projected coordinate (and, when causal, `u <= t`).
pub fn nearby_mask(target: Dims3, cond: Dims3, extent: Extent, causal: bool) -> Result<AttnMask> {
    check_causal(target, cond, causal)?;
    target.check_nonzero("target")?;
    cond.check_nonzero("condition")?;
    let (nq, nk) = (target.len(), cond.len());
    let mut bits = vec![false; nq * nk];
    for t in 0..nq {
        let center = project_coord(target, cond, target.unflat(t))?;
        for u in neighborhood(cond, center, extent) {
            if !causal || u <= t {
                bits[t * nk + u] = true;
            }
        }
    }
    Ok(AttnMask {
        q_dims: target,
        k_dims: cond,
        bits,
    })
}

/// Keys sharing at least two of the three coordinates with the query.
pub fn axial_mask(dims: Dims3, causal: bool) -> Result<AttnMask> {
    AttnMask::from_fn(dims, dims, |t, u| {
        let (a, b) = (dims.unflat(t), dims.unflat(u));
        let differing = (a.0 != b.0) as u8 + (a.1 != b.1) as u8 + (a.2 != b.2) as u8;
        differing <= 1 && (!causal || u <= t)
    })
}

/// Keys inside the same fixed `block` as the query.
pub fn block_mask(dims: Dims3, block: Dims3, causal: bool) -> Result<AttnMask> {
    block.check_nonzero("block")?;
    if dims.h % block.h != 0 || dims.w % block.w != 0 || dims.s % block.s != 0 {
        return Err(Error::contract(format!("block dims {block} do not divide {dims}")));
    }
    AttnMask::from_fn(dims, dims, |t, u| {
        let (a, b) = (dims.unflat(t), dims.unflat(u));
        a.0 / block.h == b.0 / block.h
            && a.1 / block.w == b.1 / block.w
            && a.2 / block.s == b.2 / block.s
            && (!causal || u <= t)
    })
}

/// Every pair, optionally restricted to `u <= t`.
pub fn full_mask(q_dims: Dims3, k_dims: Dims3, causal: bool) -> Result<AttnMask> {
    check_causal(q_dims, k_dims, causal)?;
    AttnMask::from_fn(q_dims, k_dims, |t, u| !causal || u <= t)
}
