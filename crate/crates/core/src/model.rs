//! The toy conditional policy: a grid-image encoder feeding a small causal
//! attention decoder over `[image cells ‖ question ‖ response]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub type Token = u32;

/// One grid cell: an object class and an attribute code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub obj: u32,
    pub attr: u32,
}

/// A synthetic `g × g` image, cells stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridImage {
    pub g: usize,
    pub cells: Vec<Cell>,
}

impl GridImage {
    pub fn new(g: usize, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != g * g {
            return Err(Error::Input(format!(
                "grid of size {g} needs {} cells, got {}",
                g * g,
                cells.len()
            )));
        }
        Ok(Self { g, cells })
    }

    pub fn filled(g: usize, cell: Cell) -> Self {
        Self {
            g,
            cells: vec![cell; g * g],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.g * self.g
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.g + col]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut Cell {
        &mut self.cells[row * self.g + col]
    }

    /// Checks cell count and that every code lies in `[0, classes)` / `[0, attributes)`.
    pub fn validate(&self, classes: usize, attributes: usize) -> Result<()> {
        if self.g == 0 || self.cells.len() != self.g * self.g {
            return Err(Error::validation("image", "cell count must equal g*g with g >= 1"));
        }
        for (i, c) in self.cells.iter().enumerate() {
            if c.obj as usize >= classes {
                return Err(Error::validation(
                    "image",
                    format!("cell {i}: object {} out of range [0,{classes})", c.obj),
                ));
            }
            if c.attr as usize >= attributes {
                return Err(Error::validation(
                    "image",
                    format!("cell {i}: attribute {} out of range [0,{attributes})", c.attr),
                ));
            }
        }
        Ok(())
    }

    /// One-hot features, one row per cell: `[g*g, classes + attributes]`.
    pub fn features(&self, classes: usize, attributes: usize) -> Result<Tensor> {
        self.validate(classes, attributes)?;
        let width = classes + attributes;
        let mut data = vec![0.0; self.num_cells() * width];
        for (i, c) in self.cells.iter().enumerate() {
            data[i * width + c.obj as usize] = 1.0;
            data[i * width + classes + c.attr as usize] = 1.0;
        }
        Tensor::matrix(self.num_cells(), width, data)
    }
}

/// Half-open cell rectangle `[r0, r1) × [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BoundingBox {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        Self { r0, c0, r1, c1 }
    }

    pub fn cell(row: usize, col: usize) -> Self {
        Self::new(row, col, row + 1, col + 1)
    }

    pub fn validate(&self, g: usize) -> Result<()> {
        if self.r0 <= self.r1 && self.r1 <= g && self.c0 <= self.c1 && self.c1 <= g {
            Ok(())
        } else {
            Err(Error::validation(
                "bbox",
                format!("{self:?} is not a valid box for a {g}x{g} grid"),
            ))
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.r0..self.r1).contains(&row) && (self.c0..self.c1).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }
}

/// Architecture and initialization settings of a [`PolicyModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub object_classes: usize,
    pub attributes: usize,
    /// Side length of the square cell grid the image encoder expects.
    pub grid_size: usize,
    pub d_model: usize,
    pub layers: usize,
    /// Attention heads per layer; must divide `d_model`.
    pub heads: usize,
    /// Hidden width of the per-layer feed-forward block; 0 disables it.
    pub d_ff: usize,
    pub max_len: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            object_classes: 4,
            attributes: 8,
            grid_size: 4,
            d_model: 32,
            layers: 2,
            heads: 1,
            d_ff: 0,
            max_len: 64,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.object_classes + self.attributes
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("object_classes", self.object_classes),
            ("attributes", self.attributes),
            ("grid_size", self.grid_size),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_len", self.max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config("heads", "must divide d_model"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Equal in everything but the initialization settings.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        let strip = |c: &ModelConfig| ModelConfig {
            init_scale: 0.0,
            seed: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("img_proj".to_string(), vec![self.feature_dim(), d]),
            ("img_bias".to_string(), vec![d]),
            ("img_row".to_string(), vec![self.grid_size, d]),
            ("img_col".to_string(), vec![self.grid_size, d]),
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_len, d]),
        ];
        let dh = d / self.heads.max(1);
        for l in 0..self.layers {
            for h in 0..self.heads {
                for w in ["wq", "wk", "wv"] {
                    out.push((format!("layer{l}.head{h}.{w}"), vec![d, dh]));
                }
                out.push((format!("layer{l}.head{h}.wo"), vec![dh, d]));
            }
            if self.d_ff > 0 {
                out.push((format!("layer{l}.ff_w1"), vec![d, self.d_ff]));
                out.push((format!("layer{l}.ff_b1"), vec![self.d_ff]));
                out.push((format!("layer{l}.ff_w2"), vec![self.d_ff, d]));
                out.push((format!("layer{l}.ff_b2"), vec![d]));
            }
        }
        out.push(("out_w".to_string(), vec![d, self.vocab_size]));
        out.push(("out_b".to_string(), vec![self.vocab_size]));
        out
    }

    /// Parameter tensors per layer.
    fn layer_stride(&self) -> usize {
        4 * self.heads + if self.d_ff > 0 { 4 } else { 0 }
    }
}

const IMG_PROJ: usize = 0;
const IMG_BIAS: usize = 1;
const IMG_ROW: usize = 2;
const IMG_COL: usize = 3;
const TOK_EMB: usize = 4;
const POS_EMB: usize = 5;
const LAYER_BASE: usize = 6;

// Large enough that exp underflows to exactly zero after max subtraction.
const MASKED_SCORE: f64 = -1e9;

/// Graph handles of a model's parameters, produced by [`PolicyModel::bind`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// The trainable policy. Parameters are plain tensors; a forward pass binds
/// them into a [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    cfg: ModelConfig,
    params: Vec<Tensor>,
}

impl PolicyModel {
    /// Seeded initialization: every weight uniform in `±init_scale` except the
    /// output projection and bias, which start at zero so the initial policy
    /// is exactly uniform over the vocabulary.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Self::init(cfg, false)
    }

    /// Like [`PolicyModel::new`] but with a random output projection too, for
    /// tests that need a non-uniform policy.
    pub fn new_randomized(cfg: ModelConfig) -> Result<Self> {
        Self::init(cfg, true)
    }

    fn init(cfg: ModelConfig, random_output: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let s = cfg.init_scale;
        let layout = cfg.param_layout();
        let n_params = layout.len();
        let params = layout
            .into_iter()
            .enumerate()
            .map(|(i, (_, shape))| {
                let n: usize = shape.iter().product();
                let is_output = i + 2 >= n_params;
                let data = if is_output && !random_output {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-s..=s)).collect()
                };
                Tensor::new(shape, data).expect("layout shape")
            })
            .collect();
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Input(format!("parameter {name} has non-finite values")));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Binds parameters into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            Some(t) => Err(Error::Input(format!(
                "token {t} outside vocabulary of size {}",
                self.cfg.vocab_size
            ))),
            None => Ok(()),
        }
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let cells = self.cfg.grid_size * self.cfg.grid_size;
        if features.rank() != 2 || features.shape() != [cells, self.cfg.feature_dim()] {
            return Err(Error::Shape {
                op: "features",
                lhs: features.shape().to_vec(),
                rhs: vec![cells, self.cfg.feature_dim()],
            });
        }
        Ok(())
    }

    /// Cell embeddings `[cells, d]` inside a graph: a linear map of the cell
    /// features plus learned row and column embeddings.
    pub fn embed_cells(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        self.check_features(g.value(features))?;
        let side = self.cfg.grid_size;
        let rows: Vec<usize> = (0..side * side).map(|i| i / side).collect();
        let cols: Vec<usize> = (0..side * side).map(|i| i % side).collect();
        let proj = g.matmul(features, b.vars[IMG_PROJ])?;
        let proj = g.add_row(proj, b.vars[IMG_BIAS])?;
        let row = g.gather_rows(b.vars[IMG_ROW], &rows)?;
        let col = g.gather_rows(b.vars[IMG_COL], &cols)?;
        let pos = g.add(row, col)?;
        g.add(proj, pos)
    }

    /// Final hidden states `[cells + tokens, d]` for an image and a token context.
    fn hidden(&self, g: &mut Graph, b: &Bound, features: Var, context: &[Token]) -> Result<Var> {
        if context.len() > self.cfg.max_len {
            return Err(Error::Input(format!(
                "context of {} tokens exceeds max_len {}",
                context.len(),
                self.cfg.max_len
            )));
        }
        let cells = self.embed_cells(g, b, features)?;
        let len = g.value(cells).shape()[0] + context.len();
        let mut h = if context.is_empty() {
            cells
        } else {
            let idx: Vec<usize> = context.iter().map(|&t| t as usize).collect();
            let toks = g.gather_rows(b.vars[TOK_EMB], &idx)?;
            let positions: Vec<usize> = (0..context.len()).collect();
            let pos = g.gather_rows(b.vars[POS_EMB], &positions)?;
            let toks = g.add(toks, pos)?;
            g.concat_rows(&[cells, toks])?
        };

        let mut mask = Tensor::zeros(&[len, len]);
        for i in 0..len {
            for j in i + 1..len {
                mask.data_mut()[i * len + j] = MASKED_SCORE;
            }
        }
        let mask = g.constant(mask);
        let inv_sqrt_dh = 1.0 / ((self.cfg.d_model / self.cfg.heads) as f64).sqrt();
        let stride = self.cfg.layer_stride();

        for l in 0..self.cfg.layers {
            let base = LAYER_BASE + stride * l;
            let w = &b.vars[base..base + stride];
            let x = h;
            for head in w[..4 * self.cfg.heads].chunks(4) {
                let q = g.matmul(x, head[0])?;
                let k = g.matmul(x, head[1])?;
                let v = g.matmul(x, head[2])?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, inv_sqrt_dh)?;
                let scores = g.add(scores, mask)?;
                let attn = g.softmax(scores)?;
                let mixed = g.matmul(attn, v)?;
                let out = g.matmul(mixed, head[3])?;
                h = g.add(h, out)?;
            }
            if self.cfg.d_ff > 0 {
                let ff = &w[4 * self.cfg.heads..];
                let a = g.matmul(h, ff[0])?;
                let a = g.add_row(a, ff[1])?;
                let gate = g.sigmoid(a)?;
                let a = g.mul(a, gate)?;
                let out = g.matmul(a, ff[2])?;
                let out = g.add_row(out, ff[3])?;
                h = g.add(h, out)?;
            }
        }
        Ok(h)
    }

    fn output_log_probs(&self, g: &mut Graph, b: &Bound, rows: Var) -> Result<Var> {
        let n = b.vars.len();
        let logits = g.matmul(rows, b.vars[n - 2])?;
        let logits = g.add_row(logits, b.vars[n - 1])?;
        g.log_softmax(logits)
    }

    /// Per-token log-probabilities of `response`, as a `[len]` node.
    pub fn token_log_probs(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: Var,
        question: &[Token],
        response: &[Token],
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::Input("response must be nonempty".into()));
        }
        self.check_tokens(question)?;
        self.check_tokens(response)?;
        self.check_features(g.value(features))?;
        let n_cells = g.value(features).shape()[0];
        if n_cells + question.len() == 0 {
            return Err(Error::Input("nothing to condition the first token on".into()));
        }
        let mut context = question.to_vec();
        context.extend_from_slice(&response[..response.len() - 1]);
        let h = self.hidden(g, b, features, &context)?;
        let first = n_cells + question.len() - 1;
        let rows: Vec<usize> = (first..first + response.len()).collect();
        let sel = g.gather_rows(h, &rows)?;
        let lp = self.output_log_probs(g, b, sel)?;
        let targets: Vec<usize> = response.iter().map(|&t| t as usize).collect();
        g.pick(lp, &targets)
    }

    /// `Σ_i weights[i]·log π(response[i] | …)` as a scalar node.
    pub fn masked_sequence_log_prob_var(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: Var,
        question: &[Token],
        response: &[Token],
        weights: &[f64],
    ) -> Result<Var> {
        if weights.len() != response.len() {
            return Err(Error::Contract(format!(
                "weights length {} != response length {}",
                weights.len(),
                response.len()
            )));
        }
        let lp = self.token_log_probs(g, b, features, question, response)?;
        g.masked_sum(lp, &Tensor::vector(weights.to_vec()))
    }

    /// Cell embeddings for an image, one row per cell in row-major order.
    pub fn encode_image(&self, img: &GridImage) -> Result<Tensor> {
        let features = img.features(self.cfg.object_classes, self.cfg.attributes)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(features);
        let e = self.embed_cells(&mut g, &b, f)?;
        Ok(g.value(e).clone())
    }

    pub fn features(&self, img: &GridImage) -> Result<Tensor> {
        img.features(self.cfg.object_classes, self.cfg.attributes)
    }

    /// Entry `i` is `log P(response[i] | img, question, response[..i])`.
    pub fn log_prob(&self, img: &GridImage, question: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        self.log_prob_features(&self.features(img)?, question, response)
    }

    pub fn log_prob_features(
        &self,
        features: &Tensor,
        question: &[Token],
        response: &[Token],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let lp = self.token_log_probs(&mut g, &b, f, question, response)?;
        Ok(g.value(lp).data().to_vec())
    }

    pub fn masked_sequence_log_prob(
        &self,
        img: &GridImage,
        question: &[Token],
        response: &[Token],
        weights: &[f64],
    ) -> Result<f64> {
        self.masked_sequence_log_prob_features(&self.features(img)?, question, response, weights)
    }

    pub fn masked_sequence_log_prob_features(
        &self,
        features: &Tensor,
        question: &[Token],
        response: &[Token],
        weights: &[f64],
    ) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let s = self.masked_sequence_log_prob_var(&mut g, &b, f, question, response, weights)?;
        g.value(s).item()
    }

    /// Log-distribution over the next token after `context`.
    pub fn next_token_log_probs(&self, features: &Tensor, context: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(context)?;
        self.check_features(features)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let h = self.hidden(&mut g, &b, f, context)?;
        let last = g.value(h).shape()[0] - 1;
        let sel = g.gather_rows(h, &[last])?;
        let lp = self.output_log_probs(&mut g, &b, sel)?;
        Ok(g.value(lp).data().to_vec())
    }

    /// Argmax decoding; ties go to the lowest token id. Stops after emitting
    /// `stop` or after `max_len` tokens.
    pub fn greedy_decode(
        &self,
        img: &GridImage,
        question: &[Token],
        max_len: usize,
        stop: Token,
    ) -> Result<Vec<Token>> {
        self.greedy_decode_features(&self.features(img)?, question, max_len, stop)
    }

    pub fn greedy_decode_features(
        &self,
        features: &Tensor,
        question: &[Token],
        max_len: usize,
        stop: Token,
    ) -> Result<Vec<Token>> {
        if max_len == 0 {
            return Err(Error::Input("max_len must be >= 1".into()));
        }
        let mut context = question.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.next_token_log_probs(features, &context)?;
            let mut best = 0;
            for (t, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = t;
                }
            }
            let tok = best as Token;
            out.push(tok);
            if tok == stop {
                break;
            }
            context.push(tok);
        }
        Ok(out)
    }
}

/// Frozen copy of a policy. There is no way to mutate the parameters of a
/// reference once created.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    inner: Arc<PolicyModel>,
}

impl ReferenceModel {
    pub fn model(&self) -> &PolicyModel {
        &self.inner
    }

    /// A second handle to the same frozen parameters.
    pub fn snapshot(&self) -> ReferenceModel {
        self.clone()
    }
}

impl std::ops::Deref for ReferenceModel {
    type Target = PolicyModel;

    fn deref(&self) -> &PolicyModel {
        &self.inner
    }
}

/// Deep copy of the current policy, detached from any training graph.
pub fn snapshot_reference(model: &PolicyModel) -> ReferenceModel {
    ReferenceModel {
        inner: Arc::new(model.clone()),
    }
}
