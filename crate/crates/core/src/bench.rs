//! Exact attended-pair counts, the asymptotic cost formulas of each attention
//! mechanism, and sparse vs dense timing.

use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend_dense_masked, attend_gathered, axial_mask, block_mask, full_mask, nearby_mask, AttnMask, Extent,
    ProjWeights, Window,
};
use crate::error::{Error, Result};
use crate::tensor::{Dims3, Matrix, Tensor4};

/// Self-attention mechanism over a 3D grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    Nearby(Extent),
    Axial,
    Block(Dims3),
    Full,
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Nearby(_) => "nearby",
            Mechanism::Axial => "axial",
            Mechanism::Block(_) => "block",
            Mechanism::Full => "full",
        }
    }

    /// Mechanism from its name plus the extent / block parameters it needs.
    pub fn parse(name: &str, extent: Option<Extent>, block: Option<Dims3>) -> Result<Self> {
        match name {
            "nearby" => extent
                .map(Mechanism::Nearby)
                .ok_or_else(|| Error::contract("nearby needs an extent")),
            "axial" => Ok(Mechanism::Axial),
            "block" => block
                .map(Mechanism::Block)
                .ok_or_else(|| Error::contract("block needs block dims")),
            "full" => Ok(Mechanism::Full),
            other => Err(Error::contract(format!("unknown mechanism {other:?}"))),
        }
    }

    pub fn mask(&self, dims: Dims3, causal: bool) -> Result<AttnMask> {
        match *self {
            Mechanism::Nearby(e) => nearby_mask(dims, dims, e, causal),
            Mechanism::Axial => axial_mask(dims, causal),
            Mechanism::Block(b) => block_mask(dims, b, causal),
            Mechanism::Full => full_mask(dims, dims, causal),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::Nearby(e) => write!(f, "nearby({e})"),
            Mechanism::Block(b) => write!(f, "block({},{},{})", b.h, b.w, b.s),
            other => f.write_str(other.name()),
        }
    }
}

/// Number of attending pairs.
pub fn count_pairs(mask: &AttnMask) -> usize {
    mask.count()
}

fn window_len(w: Window, len: usize) -> usize {
    match w {
        Window::Size(e) => e,
        Window::All => len,
    }
}

/// Literal value of the cost expression, no constants and no edge clipping:
/// nearby `hws * e_h e_w e_s`, axial `hws (h+w+s)`, block `(hws/b)^2` with `b`
/// the number of blocks, full `(hws)^2`.
pub fn formula_cost(mechanism: Mechanism, dims: Dims3) -> Result<u128> {
    dims.check_nonzero("formula")?;
    let n = dims.len() as u128;
    Ok(match mechanism {
        Mechanism::Nearby(e) => {
            n * (window_len(e.h, dims.h) * window_len(e.w, dims.w) * window_len(e.s, dims.s)) as u128
        }
        Mechanism::Axial => n * (dims.h + dims.w + dims.s) as u128,
        Mechanism::Block(b) => {
            let per = block_volume(dims, b)?;
            per * per
        }
        Mechanism::Full => n * n,
    })
}

/// The block expression read as a sum over blocks: `b * (hws/b)^2`.
pub fn block_summed_cost(dims: Dims3, block: Dims3) -> Result<u128> {
    let per = block_volume(dims, block)?;
    Ok(dims.len() as u128 / per * per * per)
}

fn block_volume(dims: Dims3, block: Dims3) -> Result<u128> {
    block.check_nonzero("block")?;
    if dims.h % block.h != 0 || dims.w % block.w != 0 || dims.s % block.s != 0 {
        return Err(Error::contract(format!("block dims {block} do not divide {dims}")));
    }
    Ok(block.len() as u128)
}

/// One row of the complexity report.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    /// CSV label; `block-summed` marks the summed reading of the block formula.
    pub label: String,
    pub mechanism: Mechanism,
    pub dims: Dims3,
    pub exact_pairs: usize,
    pub formula_value: u128,
    pub median_ns_sparse: u128,
    pub median_ns_dense: u128,
    pub calls: usize,
}

/// Benchmark settings.
#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub dims: Vec<Dims3>,
    pub mechanisms: Vec<Mechanism>,
    pub repeats: usize,
    pub seed: u64,
    pub width: usize,
    pub causal: bool,
    pub parallel: bool,
}

impl BenchConfig {
    pub fn new(dims: Vec<Dims3>, mechanisms: Vec<Mechanism>, repeats: usize, seed: u64) -> Self {
        BenchConfig {
            dims,
            mechanisms,
            repeats,
            seed,
            width: 16,
            causal: false,
            parallel: false,
        }
    }
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Counts, formula values and median wall time of the gathered and the dense
/// path for every (dims, mechanism) pair.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<ComplexityReport>> {
    if config.repeats < 3 {
        return Err(Error::contract(format!("repeats must be >= 3, got {}", config.repeats)));
    }
    let d = config.width;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = ProjWeights::new(
        random_matrix(&mut rng, d, d),
        random_matrix(&mut rng, d, d),
        random_matrix(&mut rng, d, d),
        1,
    )?;
    let mut out = Vec::new();
    for &dims in &config.dims {
        let x = Tensor4::from_matrix(dims, random_matrix(&mut rng, dims.len(), d))?;
        for &mech in &config.mechanisms {
            let mask = mech.mask(dims, config.causal)?;
            let mut sparse = Vec::with_capacity(config.repeats);
            let mut dense = Vec::with_capacity(config.repeats);
            for _ in 0..config.repeats {
                let t0 = Instant::now();
                std::hint::black_box(attend_gathered(&x, &x, &weights, &mask, config.parallel)?);
                sparse.push(t0.elapsed().as_nanos());
                let t0 = Instant::now();
                std::hint::black_box(attend_dense_masked(&x, &x, &weights, &mask)?);
                dense.push(t0.elapsed().as_nanos());
            }
            let report = ComplexityReport {
                label: mech.name().to_string(),
                mechanism: mech,
                dims,
                exact_pairs: count_pairs(&mask),
                formula_value: formula_cost(mech, dims)?,
                median_ns_sparse: median(sparse),
                median_ns_dense: median(dense),
                calls: config.repeats,
            };
            if let Mechanism::Block(b) = mech {
                let summed = ComplexityReport {
                    label: "block-summed".into(),
                    formula_value: block_summed_cost(dims, b)?,
                    ..report.clone()
                };
                out.push(report);
                out.push(summed);
            } else {
                out.push(report);
            }
        }
    }
    Ok(out)
}

pub const CSV_HEADER: &str =
    "mechanism,h,w,s,e_h,e_w,e_s,b_h,b_w,b_s,exact_pairs,formula_value,median_ns_sparse,median_ns_dense";

pub fn report_csv(reports: &[ComplexityReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let e = match r.mechanism {
            Mechanism::Nearby(e) => format!("{},{},{}", e.h, e.w, e.s),
            _ => ",,".into(),
        };
        let b = match r.mechanism {
            Mechanism::Block(b) => format!("{},{},{}", b.h, b.w, b.s),
            _ => ",,".into(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{e},{b},{},{},{},{}",
            r.label, r.dims.h, r.dims.w, r.dims.s, r.exact_pairs, r.formula_value, r.median_ns_sparse, r.median_ns_dense
        );
    }
    out
}
