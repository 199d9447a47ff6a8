use super::config::LossReduction;
use super::params::{Ffn, Model};
use crate::attention::{dense_attention, nearby_mask, nearby_neighbors, sparse_attention, AttnVars, Extent};
use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::tensor::{Dims3, Matrix, Tape, Tensor4, Var};

/// Reserved text id whose embedding stands for the `None` condition.
pub const NONE_TOKEN: usize = 0;

/// What the encoder is conditioned on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Condition {
    /// Text token ids; 0 is reserved for `None`.
    Text(Vec<usize>),
    /// The constant `None` condition used for video prediction.
    None,
}

impl Condition {
    pub fn ids(&self) -> Vec<usize> {
        match self {
            Condition::Text(ids) => ids.clone(),
            Condition::None => vec![NONE_TOKEN],
        }
    }

    /// Text is laid out as `1 x 1 x len`.
    pub fn dims(&self) -> Dims3 {
        Dims3::new(1, 1, self.ids().len())
    }
}

/// Which attention implementation the graph uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionPath {
    /// Gathered neighbourhoods.
    Sparse,
    /// Full score matrix with masking; the reference path.
    Dense,
}

/// Tape handles for every model parameter.
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    /// Parameters as differentiable leaves.
    pub fn leaves(tape: &mut Tape, model: &Model) -> Self {
        ModelVars {
            vars: model.values().iter().map(|m| tape.leaf(m.clone())).collect(),
        }
    }

    /// Parameters as constants (inference).
    pub fn constants(tape: &mut Tape, model: &Model) -> Self {
        ModelVars {
            vars: model.values().iter().map(|m| tape.constant(m.clone())).collect(),
        }
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        ModelVars { vars }
    }

    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Builds model computations on a tape.
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    pub model: &'a Model,
    pub vars: &'a ModelVars,
    pub path: AttentionPath,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a mut Tape, model: &'a Model, vars: &'a ModelVars) -> Self {
        Graph {
            tape,
            model,
            vars,
            path: AttentionPath::Sparse,
        }
    }

    pub fn with_path(mut self, path: AttentionPath) -> Self {
        self.path = path;
        self
    }

    fn p(&self, i: usize) -> Var {
        self.vars.get(i)
    }

    /// Sum of the three axis rows for the first `n` positions of `dims`.
    fn positional(&mut self, tables: [usize; 3], dims: Dims3, n: usize) -> Result<Var> {
        let (mut hi, mut wi, mut si) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for t in 0..n {
            let (i, j, k) = dims.unflat(t);
            hi.push(i);
            wi.push(j);
            si.push(k);
        }
        let ph = self.tape.gather_rows(self.p(tables[0]), &hi)?;
        let pw = self.tape.gather_rows(self.p(tables[1]), &wi)?;
        let ps = self.tape.gather_rows(self.p(tables[2]), &si)?;
        let sum = self.tape.add(ph, pw)?;
        self.tape.add(sum, ps)
    }

    fn check_fits(&self, what: &str, dims: Dims3, max: Dims3) -> Result<()> {
        dims.check_nonzero(what)?;
        if dims.h > max.h || dims.w > max.w || dims.s > max.s {
            return Err(Error::shape("positional encoding", format!("{what} {dims}"), format!("tables for {max}")));
        }
        Ok(())
    }

    /// Embedded condition plus its positional encoding.
    pub fn condition_input(&mut self, cond: &Condition) -> Result<(Var, Dims3)> {
        let config = self.model.config();
        let ids = cond.ids();
        if ids.is_empty() {
            return Err(Error::contract("text condition needs at least one token"));
        }
        if let Condition::Text(_) = cond {
            if ids.contains(&NONE_TOKEN) {
                return Err(Error::contract("text id 0 is reserved for the None condition"));
            }
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= config.text_vocab) {
            return Err(Error::Index {
                what: "text vocabulary",
                index: bad,
                bound: config.text_vocab,
            });
        }
        let dims = cond.dims();
        self.check_fits("condition", dims, config.cond_dims)?;
        let idx = self.model.index();
        let emb = self.tape.gather_rows(self.p(idx.text_embed), &ids)?;
        let pos = self.positional(idx.cond_pos, dims, dims.len())?;
        Ok((self.tape.add(emb, pos)?, dims))
    }

    fn attention(
        &mut self,
        x: Var,
        c: Var,
        w: AttnVars,
        dims: (Dims3, Dims3),
        extent: Extent,
        causal: bool,
    ) -> Result<Var> {
        let heads = self.model.config().heads;
        let n_q = self.tape.value(x).rows();
        match self.path {
            AttentionPath::Sparse => {
                let nb = nearby_neighbors(dims.0, dims.1, extent, causal, n_q)?;
                sparse_attention(self.tape, x, c, w, nb, heads)
            }
            AttentionPath::Dense => {
                let mask = nearby_mask(dims.0, dims.1, extent, causal)?;
                dense_attention(self.tape, x, c, w, &mask, heads)
            }
        }
    }

    fn ffn(&mut self, x: Var, f: Ffn) -> Result<Var> {
        let h = self.tape.matmul(x, self.p(f.w1))?;
        let h = self.tape.add_row(h, self.p(f.b1))?;
        let h = self.tape.gelu(h);
        let h = self.tape.matmul(h, self.p(f.w2))?;
        self.tape.add_row(h, self.p(f.b2))
    }

    fn norm(&mut self, x: Var, gain: usize, bias: usize) -> Result<Var> {
        let eps = self.model.config().ln_eps;
        self.tape.layer_norm_rows(x, self.p(gain), self.p(bias), eps)
    }

    /// Stack of pre-norm nearby self-attention blocks over the condition.
    pub fn encode(&mut self, c0: Var, dims: Dims3) -> Result<Var> {
        let extent = self.model.config().encoder_extent;
        let layers = self.model.index().encoder.clone();
        let mut x = c0;
        for l in layers {
            let n = self.norm(x, l.ln1_gain, l.ln1_bias)?;
            let w = AttnVars {
                w_q: self.p(l.w_q),
                w_k: self.p(l.w_k),
                w_v: self.p(l.w_v),
            };
            let a = self.attention(n, n, w, (dims, dims), extent, false)?;
            x = self.tape.add(x, a)?;
            let n = self.norm(x, l.ln2_gain, l.ln2_bias)?;
            let f = self.ffn(n, l.ffn)?;
            x = self.tape.add(x, f)?;
        }
        Ok(x)
    }

    /// Decoder input rows for the first `n` positions: the begin-of-sequence
    /// vector followed by embeddings of `tokens[..n-1]`, plus target positions.
    pub fn decoder_input(&mut self, tokens: &[usize], n: usize, dims: Dims3) -> Result<Var> {
        let config = self.model.config();
        self.check_fits("target", dims, config.target_dims)?;
        if n == 0 || n > dims.len() || tokens.len() + 1 < n {
            return Err(Error::contract(format!(
                "decoder prefix of {n} rows needs 1..={} positions and {} tokens, got {}",
                dims.len(),
                n.saturating_sub(1),
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens[..n - 1].iter().find(|&&t| t >= config.vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: config.vocab,
            });
        }
        let idx = self.model.index();
        let bos = self.p(idx.bos);
        let rows = if n > 1 {
            let emb = self.tape.gather_rows(self.p(idx.token_embed), &tokens[..n - 1])?;
            self.tape.concat_rows(&[bos, emb])?
        } else {
            bos
        };
        let pos = self.positional(idx.target_pos, dims, n)?;
        self.tape.add(rows, pos)
    }

    /// Decoder layers over a prefix of `dims` (one row per position).
    pub fn decode(&mut self, y: Var, dims: Dims3, c_l: Var, c_dims: Dims3) -> Result<Var> {
        let config = self.model.config();
        let (self_ext, cross_ext) = (config.decoder_self_extent, config.decoder_cross_extent);
        let layers = self.model.index().decoder.clone();
        let mut x = y;
        for l in layers {
            let n = self.norm(x, l.ln1_gain, l.ln1_bias)?;
            let sw = AttnVars {
                w_q: self.p(l.self_q),
                w_k: self.p(l.self_k),
                w_v: self.p(l.self_v),
            };
            let cw = AttnVars {
                w_q: self.p(l.cross_q),
                w_k: self.p(l.cross_k),
                w_v: self.p(l.cross_v),
            };
            let sa = self.attention(n, n, sw, (dims, dims), self_ext, true)?;
            let ca = self.attention(n, c_l, cw, (dims, c_dims), cross_ext, false)?;
            let a = self.tape.add(sa, ca)?;
            x = self.tape.add(x, a)?;
            let n = self.norm(x, l.ln2_gain, l.ln2_bias)?;
            let f = self.ffn(n, l.ffn)?;
            x = self.tape.add(x, f)?;
        }
        Ok(x)
    }

    pub fn logits(&mut self, hidden: Var) -> Result<Var> {
        let idx = self.model.index();
        let z = self.tape.matmul(hidden, self.p(idx.head_w))?;
        self.tape.add_row(z, self.p(idx.head_b))
    }

    /// Teacher-forced hidden states and logits for a whole target grid.
    pub fn teacher_forced(&mut self, cond: &Condition, target: &TokenGrid) -> Result<(Var, Var)> {
        let (c0, c_dims) = self.condition_input(cond)?;
        let c_l = self.encode(c0, c_dims)?;
        let dims = target.dims();
        let tokens = target.to_usize();
        let y = self.decoder_input(&tokens, dims.len(), dims)?;
        let hidden = self.decode(y, dims, c_l, c_dims)?;
        let logits = self.logits(hidden)?;
        Ok((hidden, logits))
    }

    /// Cross-entropy over target positions `skip..`, reduced per the config.
    pub fn nll(&mut self, cond: &Condition, target: &TokenGrid, skip: usize) -> Result<Var> {
        let config = self.model.config();
        if target.vocab() > config.vocab {
            if let Some(&bad) = target.ids().iter().find(|&&id| id as usize >= config.vocab) {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: bad as usize,
                    bound: config.vocab,
                });
            }
        }
        let n = target.dims().len();
        if skip >= n {
            return Err(Error::contract(format!("all {n} target positions are excluded from the loss")));
        }
        let weights = position_weights(n, skip, config.reduction);
        let (_, logits) = self.teacher_forced(cond, target)?;
        self.tape.cross_entropy(logits, &target.to_usize(), &weights)
    }
}

/// Per-position loss weights: 0 on the first `skip` positions, then `1/(n-skip)`
/// (mean) or 1 (sum).
pub fn position_weights(n: usize, skip: usize, reduction: LossReduction) -> Vec<f64> {
    let w = match reduction {
        LossReduction::Mean => 1.0 / (n.saturating_sub(skip).max(1)) as f64,
        LossReduction::Sum => 1.0,
    };
    (0..n).map(|t| if t < skip { 0.0 } else { w }).collect()
}

/// `x[i,j,k] + P_h[i] + P_w[j] + P_s[k]`.
pub fn add_positional(x: &Tensor4, p_h: &Matrix, p_w: &Matrix, p_s: &Matrix) -> Result<Tensor4> {
    let dims = x.dims();
    let d = x.width();
    for (table, len) in [(p_h, dims.h), (p_w, dims.w), (p_s, dims.s)] {
        if table.rows() < len || table.cols() != d {
            return Err(Error::shape(
                "add_positional",
                format!("{dims}x{d}"),
                format!("table {}", table.shape_str()),
            ));
        }
    }
    let mut out = x.clone();
    for t in 0..dims.len() {
        let (i, j, k) = dims.unflat(t);
        let row = out.at_mut(i, j, k);
        for c in 0..d {
            row[c] += p_h.get(i, c) + p_w.get(j, c) + p_s.get(k, c);
        }
    }
    Ok(out)
}

/// `hidden * head + bias`.
pub fn logits(hidden: &[f64], head: &Matrix, bias: &[f64]) -> Result<Vec<f64>> {
    if hidden.len() != head.rows() || bias.len() != head.cols() {
        return Err(Error::shape(
            "logits",
            format!("hidden of {}", hidden.len()),
            format!("head {}, bias of {}", head.shape_str(), bias.len()),
        ));
    }
    let z = Matrix::row_vector(hidden).matmul(head)?;
    Ok(z.data().iter().zip(bias).map(|(a, b)| a + b).collect())
}

impl Model {
    fn inference<T>(&self, path: AttentionPath, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let vars = ModelVars::constants(&mut tape, self);
        let mut g = Graph::new(&mut tape, self, &vars).with_path(path);
        f(&mut g)
    }

    /// Embedded condition with positional encoding, before the encoder.
    pub fn condition_repr(&self, cond: &Condition) -> Result<Tensor4> {
        self.inference(AttentionPath::Sparse, |g| {
            let (c0, dims) = g.condition_input(cond)?;
            Tensor4::from_matrix(dims, g.tape.value(c0).clone())
        })
    }

    /// Run the encoder stack on a positionally encoded condition.
    pub fn encode(&self, c0: &Tensor4) -> Result<Tensor4> {
        self.encode_with(c0, AttentionPath::Sparse)
    }

    pub fn encode_with(&self, c0: &Tensor4, path: AttentionPath) -> Result<Tensor4> {
        if c0.width() != self.config().d_model {
            return Err(Error::shape(
                "encode",
                format!("condition width {}", c0.width()),
                format!("d_model {}", self.config().d_model),
            ));
        }
        self.inference(path, |g| {
            let x = g.tape.constant(c0.to_matrix());
            let out = g.encode(x, c0.dims())?;
            Tensor4::from_matrix(c0.dims(), g.tape.value(out).clone())
        })
    }

    /// Decoder input rows (begin-of-sequence + shifted tokens + positions).
    pub fn decoder_input(&self, tokens: &[usize], n: usize, dims: Dims3) -> Result<Matrix> {
        self.inference(AttentionPath::Sparse, |g| {
            let y = g.decoder_input(tokens, n, dims)?;
            Ok(g.tape.value(y).clone())
        })
    }

    /// Hidden states for a prefix of `target_dims` given the encoded condition.
    pub fn decode_hidden(&self, prefix: &Matrix, target_dims: Dims3, c_l: &Tensor4) -> Result<Matrix> {
        self.decode_hidden_with(prefix, target_dims, c_l, AttentionPath::Sparse)
    }

    pub fn decode_hidden_with(
        &self,
        prefix: &Matrix,
        target_dims: Dims3,
        c_l: &Tensor4,
        path: AttentionPath,
    ) -> Result<Matrix> {
        let d = self.config().d_model;
        if prefix.cols() != d || c_l.width() != d {
            return Err(Error::shape(
                "decode_hidden",
                format!("prefix {} / condition width {}", prefix.shape_str(), c_l.width()),
                format!("d_model {d}"),
            ));
        }
        if prefix.rows() == 0 || prefix.rows() > target_dims.len() {
            return Err(Error::contract(format!(
                "prefix of {} rows does not fit {target_dims}",
                prefix.rows()
            )));
        }
        self.inference(path, |g| {
            let y = g.tape.constant(prefix.clone());
            let c = g.tape.constant(c_l.to_matrix());
            let h = g.decode(y, target_dims, c, c_l.dims())?;
            Ok(g.tape.value(h).clone())
        })
    }

    /// Teacher-forced loss value.
    pub fn teacher_forced_nll(&self, cond: &Condition, target: &TokenGrid) -> Result<f64> {
        self.inference(AttentionPath::Sparse, |g| {
            let loss = g.nll(cond, target, 0)?;
            Ok(g.tape.scalar(loss))
        })
    }

    /// Teacher-forced hidden states and the per-position cross-entropies.
    pub fn position_losses(&self, cond: &Condition, target: &TokenGrid) -> Result<(Matrix, Vec<f64>)> {
        self.inference(AttentionPath::Sparse, |g| {
            let (hidden, logits) = g.teacher_forced(cond, target)?;
            let z = g.tape.value(logits);
            let losses = target
                .to_usize()
                .iter()
                .enumerate()
                .map(|(t, &y)| crate::tensor::cross_entropy_logits(z.row(t), y))
                .collect::<Result<Vec<_>>>()?;
            Ok((g.tape.value(hidden).clone(), losses))
        })
    }

    /// Vocabulary scores for one hidden vector.
    pub fn logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let idx = self.index();
        logits(hidden, self.param(idx.head_w), self.param(idx.head_b).data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{dense_attention, full_mask};
    use crate::model::ModelConfig;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn grid(dims: Dims3, vocab: usize, seed: u64) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..dims.len()).map(|_| rng.gen_range(0..vocab as u32)).collect();
        TokenGrid::new(dims, vocab, ids).unwrap()
    }

    #[test]
    fn positional_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::from_matrix(Dims3::new(2, 2, 3), random(&mut rng, 12, 4)).unwrap();
        let z = Matrix::zeros(3, 4);
        assert_eq!(add_positional(&x, &z, &z, &z).unwrap(), x);

        let (ph, pw, ps) = (random(&mut rng, 2, 4), random(&mut rng, 2, 4), random(&mut rng, 3, 4));
        let one = Tensor4::from_vec(Dims3::new(1, 1, 1), 4, vec![0.5; 4]).unwrap();
        let y = add_positional(&one, &ph, &pw, &ps).unwrap();
        for c in 0..4 {
            assert_eq!(y.data()[c], 0.5 + ph.get(0, c) + pw.get(0, c) + ps.get(0, c));
        }

        let y = add_positional(&x, &ph, &pw, &ps).unwrap();
        for c in 0..4 {
            let diff = (y.at(1, 0, 2)[c] - x.at(1, 0, 2)[c]) - (y.at(1, 0, 0)[c] - x.at(1, 0, 0)[c]);
            assert!((diff - (ps.get(2, c) - ps.get(0, c))).abs() < 1e-14);
        }
        assert!(add_positional(&x, &ph, &pw, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn positions_are_distinguishable() {
        let model = Model::init_scaled(ModelConfig::toy(), 2, 1.0).unwrap();
        let dims = model.config().target_dims;
        let rows = model.decoder_input(&[0; 7], 8, dims).unwrap();
        let bos_free: Vec<Vec<f64>> = (0..8).map(|t| rows.row(t).to_vec()).collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(bos_free[a], bos_free[b]);
            }
        }
    }

    #[test]
    fn zero_attention_and_ffn_is_identity_encoder() {
        let mut model = Model::init(ModelConfig::toy(), 3).unwrap();
        let idx = model.index().clone();
        for l in &idx.encoder {
            for p in [l.w_v, l.ffn.w2, l.ffn.b2] {
                let (r, c) = model.param(p).shape();
                *model.param_mut(p) = Matrix::zeros(r, c);
            }
        }
        let c0 = model.condition_repr(&Condition::Text(vec![1, 2, 3])).unwrap();
        assert_eq!(model.encode(&c0).unwrap(), c0);
    }

    #[test]
    fn text_encoder_attention_is_full() {
        // with extent (1,1,All) over a 1x1x3 condition, every layer's attention
        // must equal full non-causal attention over the three tokens
        let model = Model::init_scaled(ModelConfig::toy(), 4, 0.5).unwrap();
        let c0 = model.condition_repr(&Condition::Text(vec![3, 1, 2])).unwrap();
        let dims = c0.dims();
        let sparse = model.encode_with(&c0, AttentionPath::Sparse).unwrap();

        let mut tape = Tape::new();
        let vars = ModelVars::constants(&mut tape, &model);
        let mask = full_mask(dims, dims, false).unwrap();
        let mut x = tape.constant(c0.to_matrix());
        let eps = model.config().ln_eps;
        for l in &model.index().encoder {
            let n = tape.layer_norm_rows(x, vars.get(l.ln1_gain), vars.get(l.ln1_bias), eps).unwrap();
            let w = AttnVars {
                w_q: vars.get(l.w_q),
                w_k: vars.get(l.w_k),
                w_v: vars.get(l.w_v),
            };
            let a = dense_attention(&mut tape, n, n, w, &mask, model.config().heads).unwrap();
            x = tape.add(x, a).unwrap();
            let n = tape.layer_norm_rows(x, vars.get(l.ln2_gain), vars.get(l.ln2_bias), eps).unwrap();
            let h = tape.matmul(n, vars.get(l.ffn.w1)).unwrap();
            let h = tape.add_row(h, vars.get(l.ffn.b1)).unwrap();
            let h = tape.gelu(h);
            let h = tape.matmul(h, vars.get(l.ffn.w2)).unwrap();
            let h = tape.add_row(h, vars.get(l.ffn.b2)).unwrap();
            x = tape.add(x, h).unwrap();
        }
        assert!(tape.value(x).max_abs_diff(&sparse.to_matrix()) < 1e-12);
    }

    #[test]
    fn decoder_single_row_and_causal_prefix() {
        let model = Model::init_scaled(ModelConfig::toy(), 5, 0.5).unwrap();
        let dims = model.config().target_dims;
        let c_l = model.encode(&model.condition_repr(&Condition::Text(vec![1, 4])).unwrap()).unwrap();
        let tokens = [3, 9, 1, 0, 15, 2, 7];
        let full = model.decode_hidden(&model.decoder_input(&tokens, 8, dims).unwrap(), dims, &c_l).unwrap();
        for n in 1..=8 {
            let prefix = model.decoder_input(&tokens, n, dims).unwrap();
            let h = model.decode_hidden(&prefix, dims, &c_l).unwrap();
            assert_eq!(h.rows(), n);
            for t in 0..n {
                assert_eq!(h.row(t), full.row(t));
            }
        }
        // perturbing the last prefix row leaves earlier rows unchanged
        let mut prefix = model.decoder_input(&tokens, 8, dims).unwrap();
        for v in prefix.row_mut(7) {
            *v += 3.0;
        }
        let h = model.decode_hidden(&prefix, dims, &c_l).unwrap();
        for t in 0..7 {
            assert_eq!(h.row(t), full.row(t));
        }
        assert_ne!(h.row(7), full.row(7));
    }

    #[test]
    fn decoder_sparse_equals_dense() {
        let model = Model::init_scaled(ModelConfig::toy(), 6, 0.5).unwrap();
        let dims = model.config().target_dims;
        let c0 = model.condition_repr(&Condition::Text(vec![2, 5, 6])).unwrap();
        let c_s = model.encode_with(&c0, AttentionPath::Sparse).unwrap();
        let c_d = model.encode_with(&c0, AttentionPath::Dense).unwrap();
        assert!(c_s.max_abs_diff(&c_d) < 1e-9);
        let prefix = model.decoder_input(&[1, 2, 3, 4, 5, 6, 7], 8, dims).unwrap();
        let a = model.decode_hidden_with(&prefix, dims, &c_s, AttentionPath::Sparse).unwrap();
        let b = model.decode_hidden_with(&prefix, dims, &c_d, AttentionPath::Dense).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    /// One decoder layer built by hand from dense attention, with the self or
    /// cross term optionally dropped.
    fn manual_decoder(model: &Model, prefix: &Matrix, dims: Dims3, c_l: &Tensor4, use_self: bool, use_cross: bool) -> Matrix {
        let mut tape = Tape::new();
        let vars = ModelVars::constants(&mut tape, model);
        let config = model.config();
        let self_mask = nearby_mask(dims, dims, config.decoder_self_extent, true).unwrap();
        let cross_mask = nearby_mask(dims, c_l.dims(), config.decoder_cross_extent, false).unwrap();
        let c = tape.constant(c_l.to_matrix());
        let mut x = tape.constant(prefix.clone());
        for l in &model.index().decoder {
            let n = tape.layer_norm_rows(x, vars.get(l.ln1_gain), vars.get(l.ln1_bias), config.ln_eps).unwrap();
            let mut terms = Vec::new();
            if use_self {
                let w = AttnVars { w_q: vars.get(l.self_q), w_k: vars.get(l.self_k), w_v: vars.get(l.self_v) };
                terms.push(dense_attention(&mut tape, n, n, w, &self_mask, config.heads).unwrap());
            }
            if use_cross {
                let w = AttnVars { w_q: vars.get(l.cross_q), w_k: vars.get(l.cross_k), w_v: vars.get(l.cross_v) };
                terms.push(dense_attention(&mut tape, n, c, w, &cross_mask, config.heads).unwrap());
            }
            for a in terms {
                x = tape.add(x, a).unwrap();
            }
            let n = tape.layer_norm_rows(x, vars.get(l.ln2_gain), vars.get(l.ln2_bias), config.ln_eps).unwrap();
            let h = tape.matmul(n, vars.get(l.ffn.w1)).unwrap();
            let h = tape.add_row(h, vars.get(l.ffn.b1)).unwrap();
            let h = tape.gelu(h);
            let h = tape.matmul(h, vars.get(l.ffn.w2)).unwrap();
            let h = tape.add_row(h, vars.get(l.ffn.b2)).unwrap();
            x = tape.add(x, h).unwrap();
        }
        tape.value(x).clone()
    }

    #[test]
    fn decoder_sums_self_and_cross_terms() {
        let base = Model::init_scaled(ModelConfig::toy(), 7, 0.5).unwrap();
        let dims = base.config().target_dims;
        let c_l = base.encode(&base.condition_repr(&Condition::Text(vec![1, 2])).unwrap()).unwrap();
        let prefix = base.decoder_input(&[4, 4, 2, 8, 1, 0, 3], 8, dims).unwrap();

        let both = manual_decoder(&base, &prefix, dims, &c_l, true, true);
        assert!(base.decode_hidden(&prefix, dims, &c_l).unwrap().max_abs_diff(&both) < 1e-9);

        let mut no_cross = base.clone();
        let mut no_self = base.clone();
        for l in &base.index().decoder {
            let (r, c) = base.param(l.cross_v).shape();
            *no_cross.param_mut(l.cross_v) = Matrix::zeros(r, c);
            *no_self.param_mut(l.self_v) = Matrix::zeros(r, c);
        }
        let self_only = manual_decoder(&no_cross, &prefix, dims, &c_l, true, false);
        let cross_only = manual_decoder(&no_self, &prefix, dims, &c_l, false, true);
        assert!(no_cross.decode_hidden(&prefix, dims, &c_l).unwrap().max_abs_diff(&self_only) < 1e-9);
        assert!(no_self.decode_hidden(&prefix, dims, &c_l).unwrap().max_abs_diff(&cross_only) < 1e-9);
    }

    #[test]
    fn logits_cases() {
        let head = Matrix::zeros(4, 5);
        let z = logits(&[0.3, 0.1, -2.0, 1.0], &head, &[0.0; 5]).unwrap();
        let p = crate::tensor::softmax_last(&z).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let codebook = random(&mut rng, 5, 4);
        let head = codebook.transpose();
        let z = logits(&[0.0, 0.0, 1.0, 0.0], &head, &[0.0; 5]).unwrap();
        for n in 0..5 {
            assert_eq!(z[n], codebook.get(n, 2));
        }

        let h = [0.2, -0.4, 0.9, 1.3];
        let b = [0.1, 0.2, 0.3, 0.4, 0.5];
        let z = logits(&h, &head, &b).unwrap();
        let oracle = Matrix::row_vector(&h).matmul(&head).unwrap();
        for n in 0..5 {
            assert_eq!(z[n], oracle.data()[n] + b[n]);
        }
        assert!(logits(&[0.0; 3], &head, &b).is_err());
    }

    #[test]
    fn zero_model_gives_log_vocab() {
        let model = Model::zeros(ModelConfig::toy()).unwrap();
        let target = grid(Dims3::new(2, 2, 2), 16, 9);
        let loss = model.teacher_forced_nll(&Condition::Text(vec![1, 2, 3]), &target).unwrap();
        assert!((loss - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn position_loss_ignores_later_targets() {
        let model = Model::init_scaled(ModelConfig::toy(), 10, 0.5).unwrap();
        let dims = Dims3::new(2, 2, 2);
        let target = grid(dims, 16, 11);
        let cond = Condition::Text(vec![2, 3]);
        let (h0, l0) = model.position_losses(&cond, &target).unwrap();
        for t in 0..7 {
            let mut ids = target.to_usize();
            for v in ids.iter_mut().skip(t + 1) {
                *v = (*v + 5) % 16;
            }
            let other = TokenGrid::from_usize(dims, 16, &ids).unwrap();
            let (h1, l1) = model.position_losses(&cond, &other).unwrap();
            for u in 0..=t {
                assert_eq!(h0.row(u), h1.row(u));
                assert_eq!(l0[u], l1[u]);
            }
        }
    }

    #[test]
    fn errors() {
        let model = Model::init(ModelConfig::toy(), 1).unwrap();
        let target = grid(Dims3::new(2, 2, 2), 16, 1);
        assert!(matches!(
            model.teacher_forced_nll(&Condition::Text(vec![1, 8]), &target),
            Err(Error::Index { .. })
        ));
        assert!(model.teacher_forced_nll(&Condition::Text(vec![0, 1]), &target).is_err());
        assert!(model.teacher_forced_nll(&Condition::Text(vec![1, 1, 1, 1]), &target).is_err());
        let big = grid(Dims3::new(2, 2, 2), 20, 2);
        let bad = TokenGrid::new(big.dims(), 20, vec![19; 8]).unwrap();
        assert!(matches!(
            model.teacher_forced_nll(&Condition::None, &bad),
            Err(Error::Index { .. })
        ));
        let too_big = grid(Dims3::new(3, 2, 1), 16, 3);
        assert!(model.teacher_forced_nll(&Condition::None, &too_big).is_err());
        let mut c = ModelConfig::toy();
        c.layers = 0;
        assert!(Model::init(c, 0).is_err());
    }

    #[test]
    fn nll_gradients_pass_finite_difference_check() {
        let model = Model::init_scaled(ModelConfig::tiny(), 12, 0.3).unwrap();
        let target = grid(Dims3::new(2, 2, 2), 8, 13);
        let cond = Condition::Text(vec![1, 3]);
        let err = finite_diff_check(
            |tape, vars| {
                let mv = ModelVars::from_vars(vars.to_vec());
                let mut g = Graph::new(tape, &model, &mv);
                g.nll(&cond, &target, 0)
            },
            model.values(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
