//! 3D nearby attention and the sparse-attention baselines it is compared with.
//!
//! A query at target position `(i, j, k)` is projected onto the condition grid
//! with [`project_coord`]; it then attends to the clipped window around that
//! coordinate ([`neighborhood`]). [`attend_sparse`] gathers exactly those keys;
//! [`attend_dense_masked`] computes the full score matrix and masks it, and
//! serves as the oracle for the gathered path.

mod mask;
mod ops;

pub use mask::{axial_mask, block_mask, full_mask, nearby_mask, AttnMask};
pub use ops::{
    attend_dense_masked, attend_gathered, attend_sparse, attention_scale, dense_attention, nearby_neighbors,
    sparse_attention, AttnVars, ProjWeights,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Dims3;

/// Window size along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Window {
    /// Odd window length centred on the projected coordinate.
    Size(usize),
    /// The whole axis.
    All,
}

impl Window {
    /// Largest admissible `|a - center|`.
    pub fn radius(self) -> usize {
        match self {
            Window::Size(e) => (e - 1) / 2,
            Window::All => usize::MAX,
        }
    }

    /// `0` stands for `All` in the binary config block.
    pub fn to_u32(self) -> u32 {
        match self {
            Window::Size(e) => e as u32,
            Window::All => 0,
        }
    }

    pub fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Window::All),
            e => Window::size(e as usize),
        }
    }

    pub fn size(e: usize) -> Result<Self> {
        if e == 0 || e % 2 == 0 {
            return Err(Error::contract(format!("window size must be a positive odd integer, got {e}")));
        }
        Ok(Window::Size(e))
    }

    /// Range of admissible coordinates around `center` on an axis of length `len`.
    fn span(self, center: usize, len: usize) -> std::ops::Range<usize> {
        let r = self.radius();
        center.saturating_sub(r)..center.saturating_add(r).saturating_add(1).min(len)
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Size(e) => write!(f, "{e}"),
            Window::All => f.write_str("all"),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") || s == "inf" {
            return Ok(Window::All);
        }
        let e: usize = s
            .parse()
            .map_err(|_| Error::contract(format!("bad window size {s:?}")))?;
        Window::size(e)
    }
}

/// Per-axis window sizes `(e_h, e_w, e_s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Extent {
    pub h: Window,
    pub w: Window,
    pub s: Window,
}

impl Extent {
    pub fn new(h: Window, w: Window, s: Window) -> Self {
        Extent { h, w, s }
    }

    /// Finite extent; every size must be odd.
    pub fn sizes(h: usize, w: usize, s: usize) -> Result<Self> {
        Ok(Extent {
            h: Window::size(h)?,
            w: Window::size(w)?,
            s: Window::size(s)?,
        })
    }

    pub fn all() -> Self {
        Extent::new(Window::All, Window::All, Window::All)
    }

    /// `(1, 1, All)`: every text token, used for text conditions.
    pub fn text() -> Self {
        Extent::new(Window::Size(1), Window::Size(1), Window::All)
    }

    /// `(3, 3, 1)`: images and image sketches.
    pub fn image() -> Self {
        Extent::new(Window::Size(3), Window::Size(3), Window::Size(1))
    }

    /// `(3, 3, 3)`: videos and video sketches.
    pub fn video() -> Self {
        Extent::new(Window::Size(3), Window::Size(3), Window::Size(3))
    }

    /// Product of finite sizes, each capped at the axis length when `All`.
    pub fn volume(&self, dims: Dims3) -> usize {
        let cap = |w: Window, len: usize| match w {
            Window::Size(e) => e,
            Window::All => len,
        };
        cap(self.h, dims.h) * cap(self.w, dims.w) * cap(self.s, dims.s)
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.h, self.w, self.s)
    }
}

impl FromStr for Extent {
    type Err = Error;

    /// `"3,3,1"` or `"1,1,all"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::contract(format!("extent needs three comma-separated sizes, got {s:?}")));
        }
        Ok(Extent {
            h: parts[0].parse()?,
            w: parts[1].parse()?,
            s: parts[2].parse()?,
        })
    }
}

/// Map a target coordinate onto the condition grid: `floor(i * h' / h)` per axis.
pub fn project_coord(target: Dims3, cond: Dims3, pos: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let (i, j, k) = pos;
    if !target.contains(i, j, k) {
        return Err(Error::Index {
            what: "target position",
            index: target.flat(i.min(target.h), j.min(target.w), k.min(target.s)),
            bound: target.len(),
        });
    }
    Ok((i * cond.h / target.h, j * cond.w / target.w, k * cond.s / target.s))
}

/// Condition positions within the extent window around `center`, clipped to
/// the grid, in canonical flat order.
pub fn neighborhood(cond: Dims3, center: (usize, usize, usize), extent: Extent) -> Vec<usize> {
    let (ci, cj, ck) = center;
    let (ri, rj, rk) = (
        extent.h.span(ci, cond.h),
        extent.w.span(cj, cond.w),
        extent.s.span(ck, cond.s),
    );
    let mut out = Vec::with_capacity(ri.len() * rj.len() * rk.len());
    for k in rk {
        for i in ri.clone() {
            for j in rj.clone() {
                out.push(cond.flat(i, j, k));
            }
        }
    }
    out
}
