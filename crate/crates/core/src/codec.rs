//! Discrete visual tokens.
//!
//! A [`Codebook`] holds `N` embedding rows of width `d_B`. Encoder features are
//! snapped to their nearest row ([`quantize`]), looked back up ([`embed`]) and
//! trained with [`vq_loss`], whose stop-gradient structure routes the codebook
//! and commitment terms to different parameters while the reconstruction
//! gradient passes straight through the quantiser.

use crate::error::{Error, Result};
use crate::tensor::{Dims3, Matrix, Tape, Tensor4, Var};

/// Learnable table of `N` visual token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Matrix,
}

impl Codebook {
    pub fn new(entries: Matrix) -> Result<Self> {
        if entries.rows() < 2 {
            return Err(Error::contract(format!(
                "codebook needs at least 2 entries, got {}",
                entries.rows()
            )));
        }
        if entries.cols() == 0 {
            return Err(Error::contract("codebook width must be >= 1"));
        }
        if entries.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("codebook entries"));
        }
        Ok(Codebook { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.entries.row(id)
    }

    /// Index and squared distance of the nearest row; ties go to the lowest index.
    pub fn nearest(&self, feature: &[f64]) -> (usize, f64) {
        nearest_row(&self.entries, feature)
    }
}

pub(crate) fn nearest_row(entries: &Matrix, feature: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for n in 0..entries.rows() {
        let d: f64 = entries
            .row(n)
            .iter()
            .zip(feature)
            .map(|(b, f)| (b - f) * (b - f))
            .sum();
        if d < best.1 {
            best = (n, d);
        }
    }
    best
}

/// Integer token ids on an `h x w x s` grid, canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    dims: Dims3,
    vocab: usize,
    ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(dims: Dims3, vocab: usize, ids: Vec<u32>) -> Result<Self> {
        dims.check_nonzero("TokenGrid")?;
        if ids.len() != dims.len() {
            return Err(Error::shape(
                "TokenGrid::new",
                format!("{dims}"),
                format!("{} ids", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad as usize,
                bound: vocab,
            });
        }
        Ok(TokenGrid { dims, vocab, ids })
    }

    pub fn from_usize(dims: Dims3, vocab: usize, ids: &[usize]) -> Result<Self> {
        let ids = ids
            .iter()
            .map(|&v| u32::try_from(v).map_err(|_| Error::Index { what: "vocabulary", index: v, bound: vocab }))
            .collect::<Result<Vec<_>>>()?;
        TokenGrid::new(dims, vocab, ids)
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> usize {
        self.ids[self.dims.flat(i, j, k)] as usize
    }

    pub fn to_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&v| v as usize).collect()
    }

    /// One text line per (frame, row), frames separated by a blank line.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for k in 0..self.dims.s {
            if k > 0 {
                out.push('\n');
            }
            for i in 0..self.dims.h {
                let row: Vec<String> = (0..self.dims.w).map(|j| self.get(i, j, k).to_string()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Encoder output `E(I)`: one `d_B` feature per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    dims: Dims3,
    features: Matrix,
}

impl FeatureGrid {
    pub fn new(dims: Dims3, features: Matrix) -> Result<Self> {
        dims.check_nonzero("FeatureGrid")?;
        if features.rows() != dims.len() {
            return Err(Error::shape(
                "FeatureGrid::new",
                format!("{dims}"),
                features.shape_str(),
            ));
        }
        Ok(FeatureGrid { dims, features })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

fn check_width(features: &Matrix, codebook: &Matrix) -> Result<()> {
    if features.cols() != codebook.cols() {
        return Err(Error::shape(
            "quantize",
            format!("features of width {}", features.cols()),
            format!("codebook of width {}", codebook.cols()),
        ));
    }
    Ok(())
}

/// Nearest codebook index per cell.
pub fn quantize(features: &FeatureGrid, codebook: &Codebook) -> Result<TokenGrid> {
    check_width(&features.features, &codebook.entries)?;
    let ids = (0..features.dims.len())
        .map(|t| codebook.nearest(features.features.row(t)).0 as u32)
        .collect();
    TokenGrid::new(features.dims, codebook.len(), ids)
}

/// Replace every token by its codebook row: dims `(h, w, s, d_B)`.
pub fn embed(tokens: &TokenGrid, codebook: &Codebook) -> Result<Tensor4> {
    if tokens.vocab > codebook.len() {
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= codebook.len()) {
            return Err(Error::Index {
                what: "codebook",
                index: bad as usize,
                bound: codebook.len(),
            });
        }
    }
    let d = codebook.width();
    let mut data = Vec::with_capacity(tokens.ids.len() * d);
    for &id in &tokens.ids {
        data.extend_from_slice(codebook.row(id as usize));
    }
    Tensor4::from_vec(tokens.dims, d, data)
}

/// Quantise `features` (rows) against `codebook` on the tape.
///
/// Returns the straight-through node (value `B[z]`, gradient copied to
/// `features`) and the assignment `z`.
pub fn quantize_straight_through(tape: &mut Tape, features: Var, codebook: Var) -> Result<(Var, Vec<usize>)> {
    let (fm, bm) = (tape.value(features), tape.value(codebook));
    check_width(fm, bm)?;
    let ids: Vec<usize> = (0..fm.rows()).map(|t| nearest_row(bm, fm.row(t)).0).collect();
    let rows = tape.gather_rows(codebook, &ids)?;
    let frozen = tape.detach(rows);
    let st = tape.straight_through(features, frozen)?;
    Ok((st, ids))
}

/// `recon + ||sg[E] - B[z]||^2 + ||E - sg[B[z]]||^2`.
///
/// The codebook term moves only the codebook, the commitment term moves only
/// the features; `reconstruction_error` is whatever scalar the caller's decoder
/// produced (typically through [`quantize_straight_through`]).
pub fn vq_loss(tape: &mut Tape, features: Var, reconstruction_error: Var, codebook: Var) -> Result<Var> {
    let (fm, bm) = (tape.value(features), tape.value(codebook));
    check_width(fm, bm)?;
    if tape.value(reconstruction_error).shape() != (1, 1) {
        return Err(Error::shape(
            "vq_loss",
            "1x1 reconstruction error",
            tape.value(reconstruction_error).shape_str(),
        ));
    }
    let ids: Vec<usize> = (0..fm.rows()).map(|t| nearest_row(bm, fm.row(t)).0).collect();
    let assigned = tape.gather_rows(codebook, &ids)?;

    let sg_features = tape.detach(features);
    let diff = tape.sub(sg_features, assigned)?;
    let codebook_term = tape.sum_squares(diff);

    let sg_assigned = tape.detach(assigned);
    let diff = tape.sub(features, sg_assigned)?;
    let commitment_term = tape.sum_squares(diff);

    let partial = tape.add(reconstruction_error, codebook_term)?;
    tape.add(partial, commitment_term)
}

/// Text token ids as a `(1, 1, s, d)` representation.
pub fn text_repr(token_ids: &[usize], table: &Matrix) -> Result<Tensor4> {
    if token_ids.is_empty() {
        return Err(Error::contract("text needs at least one token"));
    }
    let mut data = Vec::with_capacity(token_ids.len() * table.cols());
    for &id in token_ids {
        if id >= table.rows() {
            return Err(Error::Index {
                what: "text vocabulary",
                index: id,
                bound: table.rows(),
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor4::from_vec(Dims3::new(1, 1, token_ids.len()), table.cols(), data)
}

/// Segmentation map (`height x width`, row-major class ids) as a one-hot
/// `(height, width, 1, classes)` volume.
pub fn onehot_sketch(seg: &[usize], height: usize, width: usize, classes: usize) -> Result<Tensor4> {
    if seg.len() != height * width {
        return Err(Error::shape(
            "onehot_sketch",
            format!("{height}x{width}"),
            format!("{} labels", seg.len()),
        ));
    }
    let mut out = Tensor4::zeros(Dims3::new(height, width, 1), classes)?;
    for (p, &class) in seg.iter().enumerate() {
        if class >= classes {
            return Err(Error::Index {
                what: "segmentation class",
                index: class,
                bound: classes,
            });
        }
        out.data_mut()[p * classes + class] = 1.0;
    }
    Ok(out)
}

/// Tiny affine patch encoder/decoder pair standing in for a convolutional VQ
/// autoencoder. Non-overlapping `patch x patch` pixel blocks map to one grid cell.
/// Video is handled frame by frame with the same weights.
#[derive(Clone, Debug)]
pub struct PatchCodec {
    pub patch: usize,
    pub channels: usize,
    /// `(patch*patch*channels) x d_B`
    pub encoder: Matrix,
    pub encoder_bias: Matrix,
    /// `d_B x (patch*patch*channels)`
    pub decoder: Matrix,
    pub decoder_bias: Matrix,
}

impl PatchCodec {
    pub fn new(patch: usize, channels: usize, encoder: Matrix, decoder: Matrix) -> Result<Self> {
        let p = patch * patch * channels;
        if encoder.rows() != p || decoder.cols() != p || encoder.cols() != decoder.rows() {
            return Err(Error::shape(
                "PatchCodec::new",
                format!("encoder {}", encoder.shape_str()),
                format!("decoder {} for patch vector {p}", decoder.shape_str()),
            ));
        }
        let (db, pv) = (encoder.cols(), p);
        Ok(PatchCodec {
            patch,
            channels,
            encoder,
            encoder_bias: Matrix::zeros(1, db),
            decoder,
            decoder_bias: Matrix::zeros(1, pv),
        })
    }

    pub fn code_width(&self) -> usize {
        self.encoder.cols()
    }

    /// Split an `(H, W, S, C)` image or video into one patch vector per grid cell.
    pub fn patchify(&self, image: &Tensor4) -> Result<(Dims3, Matrix)> {
        let dims = image.dims();
        if image.width() != self.channels || dims.h % self.patch != 0 || dims.w % self.patch != 0 {
            return Err(Error::shape(
                "patchify",
                format!("{dims}x{}", image.width()),
                format!("patch {} with {} channels", self.patch, self.channels),
            ));
        }
        let grid = Dims3::new(dims.h / self.patch, dims.w / self.patch, dims.s);
        let pv = self.patch * self.patch * self.channels;
        let mut m = Matrix::zeros(grid.len(), pv);
        for t in 0..grid.len() {
            let (gi, gj, k) = grid.unflat(t);
            let row = m.row_mut(t);
            let mut o = 0;
            for di in 0..self.patch {
                for dj in 0..self.patch {
                    let px = image.at(gi * self.patch + di, gj * self.patch + dj, k);
                    row[o..o + self.channels].copy_from_slice(px);
                    o += self.channels;
                }
            }
        }
        Ok((grid, m))
    }

    /// Inverse of [`PatchCodec::patchify`].
    pub fn unpatchify(&self, grid: Dims3, patches: &Matrix) -> Result<Tensor4> {
        let dims = Dims3::new(grid.h * self.patch, grid.w * self.patch, grid.s);
        let mut out = Tensor4::zeros(dims, self.channels)?;
        for t in 0..grid.len() {
            let (gi, gj, k) = grid.unflat(t);
            let row = patches.row(t);
            let mut o = 0;
            for di in 0..self.patch {
                for dj in 0..self.patch {
                    out.at_mut(gi * self.patch + di, gj * self.patch + dj, k)
                        .copy_from_slice(&row[o..o + self.channels]);
                    o += self.channels;
                }
            }
        }
        Ok(out)
    }

    pub fn encode(&self, image: &Tensor4) -> Result<FeatureGrid> {
        let (grid, patches) = self.patchify(image)?;
        let mut f = patches.matmul(&self.encoder)?;
        for r in 0..f.rows() {
            for (v, b) in f.row_mut(r).iter_mut().zip(self.encoder_bias.data()) {
                *v += b;
            }
        }
        FeatureGrid::new(grid, f)
    }

    pub fn decode(&self, tokens: &TokenGrid, codebook: &Codebook) -> Result<Tensor4> {
        let z = embed(tokens, codebook)?.into_matrix();
        let mut p = z.matmul(&self.decoder)?;
        for r in 0..p.rows() {
            for (v, b) in p.row_mut(r).iter_mut().zip(self.decoder_bias.data()) {
                *v += b;
            }
        }
        self.unpatchify(tokens.dims(), &p)
    }

    /// Full VQ objective for one image on `tape`. Returns `(loss, assignment)`.
    pub fn objective(&self, tape: &mut Tape, vars: &CodecVars, image: &Tensor4) -> Result<(Var, Vec<usize>)> {
        let (_, patches) = self.patchify(image)?;
        let x = tape.constant(patches);
        let f = tape.matmul(x, vars.encoder)?;
        let f = tape.add_row(f, vars.encoder_bias)?;
        let (q, ids) = quantize_straight_through(tape, f, vars.codebook)?;
        let r = tape.matmul(q, vars.decoder)?;
        let r = tape.add_row(r, vars.decoder_bias)?;
        let diff = tape.sub(r, x)?;
        let recon = tape.sum_squares(diff);
        Ok((vq_loss(tape, f, recon, vars.codebook)?, ids))
    }

    pub fn register(&self, tape: &mut Tape, codebook: &Codebook) -> CodecVars {
        CodecVars {
            encoder: tape.leaf(self.encoder.clone()),
            encoder_bias: tape.leaf(self.encoder_bias.clone()),
            decoder: tape.leaf(self.decoder.clone()),
            decoder_bias: tape.leaf(self.decoder_bias.clone()),
            codebook: tape.leaf(codebook.entries().clone()),
        }
    }
}

/// Tape handles for a [`PatchCodec`] and its codebook.
#[derive(Clone, Copy, Debug)]
pub struct CodecVars {
    pub encoder: Var,
    pub encoder_bias: Var,
    pub decoder: Var,
    pub decoder_bias: Var,
    pub codebook: Var,
}
