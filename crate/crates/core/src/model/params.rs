use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub self_q: usize,
    pub self_k: usize,
    pub self_v: usize,
    pub cross_q: usize,
    pub cross_k: usize,
    pub cross_v: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ffn: Ffn,
}

/// Positions of every parameter in the flat parameter list.
#[derive(Clone, Debug)]
pub struct ParamIndex {
    pub token_embed: usize,
    pub text_embed: usize,
    pub bos: usize,
    pub target_pos: [usize; 3],
    pub cond_pos: [usize; 3],
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head_w: usize,
    pub head_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

/// Names and shapes of all parameters in checkpoint order.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
    pub index: ParamIndex,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut b = Builder::default();
        let d = config.d_model;
        let f = d * config.ffn_multiplier;
        let (t, c) = (config.target_dims, config.cond_dims);

        let token_embed = b.add("token_embed", config.vocab, d, Init::Uniform);
        let text_embed = b.add("text_embed", config.text_vocab, d, Init::Uniform);
        let bos = b.add("bos", 1, d, Init::Uniform);
        let target_pos = [
            b.add("pos.target.h", t.h, d, Init::Uniform),
            b.add("pos.target.w", t.w, d, Init::Uniform),
            b.add("pos.target.s", t.s, d, Init::Uniform),
        ];
        let cond_pos = [
            b.add("pos.cond.h", c.h, d, Init::Uniform),
            b.add("pos.cond.w", c.w, d, Init::Uniform),
            b.add("pos.cond.s", c.s, d, Init::Uniform),
        ];
        let ffn = |b: &mut Builder, p: &str| Ffn {
            w1: b.add(&format!("{p}.ffn.w1"), d, f, Init::Uniform),
            b1: b.add(&format!("{p}.ffn.b1"), 1, f, Init::Zeros),
            w2: b.add(&format!("{p}.ffn.w2"), f, d, Init::Uniform),
            b2: b.add(&format!("{p}.ffn.b2"), 1, d, Init::Zeros),
        };
        let encoder = (0..config.layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayer {
                    ln1_gain: b.add(&format!("{p}.ln1.gain"), 1, d, Init::Ones),
                    ln1_bias: b.add(&format!("{p}.ln1.bias"), 1, d, Init::Zeros),
                    w_q: b.add(&format!("{p}.attn.wq"), d, d, Init::Uniform),
                    w_k: b.add(&format!("{p}.attn.wk"), d, d, Init::Uniform),
                    w_v: b.add(&format!("{p}.attn.wv"), d, d, Init::Uniform),
                    ln2_gain: b.add(&format!("{p}.ln2.gain"), 1, d, Init::Ones),
                    ln2_bias: b.add(&format!("{p}.ln2.bias"), 1, d, Init::Zeros),
                    ffn: ffn(&mut b, &p),
                }
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayer {
                    ln1_gain: b.add(&format!("{p}.ln1.gain"), 1, d, Init::Ones),
                    ln1_bias: b.add(&format!("{p}.ln1.bias"), 1, d, Init::Zeros),
                    self_q: b.add(&format!("{p}.self.wq"), d, d, Init::Uniform),
                    self_k: b.add(&format!("{p}.self.wk"), d, d, Init::Uniform),
                    self_v: b.add(&format!("{p}.self.wv"), d, d, Init::Uniform),
                    cross_q: b.add(&format!("{p}.cross.wq"), d, d, Init::Uniform),
                    cross_k: b.add(&format!("{p}.cross.wk"), d, d, Init::Uniform),
                    cross_v: b.add(&format!("{p}.cross.wv"), d, d, Init::Uniform),
                    ln2_gain: b.add(&format!("{p}.ln2.gain"), 1, d, Init::Ones),
                    ln2_bias: b.add(&format!("{p}.ln2.bias"), 1, d, Init::Zeros),
                    ffn: ffn(&mut b, &p),
                }
            })
            .collect();
        let head_w = b.add("head.w", d, config.vocab, Init::Uniform);
        let head_b = b.add("head.b", 1, config.vocab, Init::Zeros);

        ParamLayout {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            index: ParamIndex {
                token_embed,
                text_embed,
                bos,
                target_pos,
                cond_pos,
                encoder,
                decoder,
                head_w,
                head_b,
            },
        }
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.shapes.iter().map(|(r, c)| r * c).sum()
    }
}

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }
}

/// Configuration plus parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: ParamLayout,
    values: Vec<Matrix>,
}

/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.02;

impl Model {
    /// Seeded initialisation: weights uniform in `[-0.02, 0.02]`, layer-norm
    /// gains 1, biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Model::init_scaled(config, seed, INIT_SCALE)
    }

    pub fn init_scaled(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(&(r, c), init)| match init {
                Init::Uniform => {
                    let data = (0..r * c).map(|_| rng.gen_range(-scale..=scale)).collect();
                    Matrix::from_vec(r, c, data).expect("layout shape")
                }
                Init::Ones => Matrix::filled(r, c, 1.0),
                Init::Zeros => Matrix::zeros(r, c),
            })
            .collect();
        Ok(Model { config, layout, values })
    }

    /// All-zero weights (layer-norm gains still 1): a uniform-logit model.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let values = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(&(r, c), init)| match init {
                Init::Ones => Matrix::filled(r, c, 1.0),
                _ => Matrix::zeros(r, c),
            })
            .collect();
        Ok(Model { config, layout, values })
    }

    pub fn from_parts(config: ModelConfig, values: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.shapes.len() {
            return Err(Error::shape(
                "Model::from_parts",
                format!("{} parameters", layout.shapes.len()),
                format!("{} values", values.len()),
            ));
        }
        for ((v, &(r, c)), name) in values.iter().zip(&layout.shapes).zip(&layout.names) {
            if v.shape() != (r, c) {
                return Err(Error::shape("Model::from_parts", format!("{name} {r}x{c}"), v.shape_str()));
            }
        }
        Ok(Model { config, layout, values })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn index(&self) -> &ParamIndex {
        &self.layout.index
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn param(&self, i: usize) -> &Matrix {
        &self.values[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.values[i]
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.layout.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn param_count(&self) -> usize {
        self.layout.count()
    }
}
