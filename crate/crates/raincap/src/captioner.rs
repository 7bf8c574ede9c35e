//! Encoder–decoder image captioning with additive attention.
//!
//! A small convolutional trunk turns an image into a grid of feature
//! vectors `a = {a_1,…,a_L}`; at every decoding step an attention module
//! scores each vector against the previous LSTM state and mixes them into
//! a context vector `ẑ_t = Σᵢ αᵢ aᵢ`; the LSTM consumes the previous word
//! embedding together with `ẑ_t`, and a deep output layer maps
//! `(embedding, context, hidden)` to a distribution over the vocabulary.
//! Training is teacher-forced cross-entropy with Adam, jointly over
//! encoder, attention, and decoder; decoding is greedy or length-normalised
//! beam search.
//!
//! The desk-scale encoder emits a 4×4 grid of 128-dimensional features; a
//! full-scale system would swap in a deep pretrained trunk emitting a
//! 14×14 grid of 2048-dimensional features, which this module documents but
//! does not instantiate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gradcore::{
    AdamConfig, Binding, Element, GradError, Graph, OptimizerState, ParamId, ParamStore, Shape,
    TensorId,
};
use crate::rainmodel::Image;

/// Padding token id.
pub const PAD: usize = 0;
/// Sequence-start token id.
pub const START: usize = 1;
/// Sequence-end token id.
pub const END: usize = 2;
/// Out-of-vocabulary token id.
pub const UNK: usize = 3;

/// Rendered forms of the four reserved ids, in id order.
const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Channel widths of the four stride-2 encoder stages; the last is the
/// feature dimension D.
const ENC_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Feature dimension D of every grid vector.
pub const FEATURE_DIM: usize = ENC_WIDTHS[3];

/// The encoder pools to a GRID×GRID map, so L = GRID².
pub const GRID: usize = 4;

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 32;

/// Normalisation guard inside the encoder's batch-norm stages.
const BN_EPS: f64 = 1e-5;

/// Errors for vocabulary handling, model wiring, and decoding.
#[derive(Debug, Error)]
pub enum CaptionerError {
    #[error("image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")]
    ImageTooSmall { height: usize, width: usize },
    #[error("caption for {image_id} spans {len} ids with start/end, over the {max_len} limit")]
    CaptionTooLong {
        image_id: String,
        len: usize,
        max_len: usize,
    },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing checkpoint tensor {0}")]
    MissingTensor(String),
    #[error("vocabulary data is malformed: {0}")]
    BadVocabulary(String),
    #[error("beam width must be at least 1")]
    BadBeamWidth,
    #[error(transparent)]
    Graph(#[from] GradError),
}

/// Convenience alias for this module's fallible operations.
pub type Result<T> = std::result::Result<T, CaptionerError>;

// ---------------------------------------------------------------------------
// Tokenisation and vocabulary
// ---------------------------------------------------------------------------

/// Lowercases, drops every character that is neither alphanumeric, an
/// apostrophe, nor whitespace, and splits on whitespace. The same pipeline
/// feeds training, decoding, and evaluation, so scores always compare like
/// with like.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|&c| c.is_alphanumeric() || c == '\'' || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Bijective token↔id map with four reserved ids (`<pad>`=0, `<start>`=1,
/// `<end>`=2, `<unk>`=3); every other token is assigned alphabetically, so
/// the mapping depends only on the token set, never on insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds from raw caption strings, keeping tokens that appear at least
    /// `min_freq` times.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in captions {
            for tok in tokenize(text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        // BTreeMap iteration is already alphabetical.
        tokens.extend(
            freq.into_iter()
                .filter(|&(_, n)| n >= min_freq.max(1))
                .map(|(t, _)| t),
        );
        Self::from_tokens(tokens).expect("specials are in place by construction")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(want) {
                return Err(CaptionerError::BadVocabulary(format!(
                    "line {id} must be {want}"
                )));
            }
        }
        let mut index = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(CaptionerError::BadVocabulary(format!(
                    "duplicate token {tok}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the four reserved ids always exist
    }

    /// Id for a token, falling back to [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Token for an id, if in range.
    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for tok in &self.tokens {
            s.push_str(tok);
            s.push('\n');
        }
        s
    }

    /// Inverse of [`Vocabulary::to_lines`].
    pub fn from_lines(s: &str) -> Result<Self> {
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}

/// One training pair: an image id, the framed token ids, and the raw text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSample {
    pub image_id: String,
    /// `<start>`, the caption tokens, `<end>`.
    pub ids: Vec<usize>,
    pub text: String,
}

impl CaptionSample {
    /// Tokenises and frames `text`; rejects captions whose framed length
    /// exceeds `max_len`.
    pub fn new(image_id: &str, text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut ids = vec![START];
        ids.extend(tokenize(text).iter().map(|t| vocab.id(t)));
        ids.push(END);
        if ids.len() > max_len {
            return Err(CaptionerError::CaptionTooLong {
                image_id: image_id.to_string(),
                len: ids.len(),
                max_len,
            });
        }
        Ok(Self {
            image_id: image_id.to_string(),
            ids,
            text: text.to_string(),
        })
    }

    /// Number of teacher-forced prediction steps (one per non-start id).
    pub fn steps(&self) -> usize {
        self.ids.len() - 1
    }
}

// ---------------------------------------------------------------------------
// Dimensions
// ---------------------------------------------------------------------------

/// Tunable decoder-side sizes. The feature dimension and grid extent are
/// fixed by the encoder trunk ([`FEATURE_DIM`], [`GRID`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionerDims {
    /// Attention projection width k.
    pub attention_dim: usize,
    /// LSTM hidden/cell width H.
    pub hidden_dim: usize,
    /// Word embedding width m.
    pub embed_dim: usize,
    /// Longest accepted framed caption, and the decoding step bound.
    pub max_len: usize,
}

impl CaptionerDims {
    /// Desk-scale defaults: k=64, H=256, m=64, captions up to 20 ids.
    pub fn desk() -> Self {
        Self {
            attention_dim: 64,
            hidden_dim: 256,
            embed_dim: 64,
            max_len: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(CaptionerError::InvalidConfig(
                "attention, hidden, and embedding widths must be positive".into(),
            ));
        }
        if self.max_len < 3 {
            return Err(CaptionerError::InvalidConfig(format!(
                "max_len {} cannot hold start, one token, and end",
                self.max_len
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Feature grid and encoder
// ---------------------------------------------------------------------------

/// L feature vectors of dimension `dim`, stored row-major `[L, dim]` with
/// L = `grid_h`·`grid_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    /// Number of grid positions L.
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolutional trunk: four stride-2 `conv → batch norm → relu` stages
/// (widths 16→32→64→128) followed by adaptive average pooling to a
/// [`GRID`]×[`GRID`] map. Normalisation always uses the statistics of the
/// tensor being processed, so a frozen encoder is a pure function of its
/// input.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    store: ParamStore,
    /// Per stage: convolution kernel, norm scale, norm shift.
    stages: Vec<(ParamId, ParamId, ParamId)>,
}

impl EncoderModel {
    /// Fresh trunk with Gaussian kernels and identity normalisation, under
    /// checkpoint names `{prefix}.c{i}.{w,gamma,beta}`.
    pub fn init(prefix: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(4);
        let mut prev = 3;
        for (i, &width) in ENC_WIDTHS.iter().enumerate() {
            let std = (2.0 / (prev * 9) as f32).sqrt();
            let w = store.add_normal(
                &format!("{prefix}.c{}.w", i + 1),
                Shape::new(&[width, prev, 3, 3]),
                std,
                &mut rng,
            );
            let gamma = store.add_full(
                &format!("{prefix}.c{}.gamma", i + 1),
                Shape::new(&[width]),
                1.0,
                true,
            );
            let beta = store.add_zeros(
                &format!("{prefix}.c{}.beta", i + 1),
                Shape::new(&[width]),
                true,
            );
            stages.push((w, gamma, beta));
            prev = width;
        }
        Self { store, stages }
    }

    /// Rebuilds the handle structure over a store loaded from a checkpoint.
    pub fn from_store(store: ParamStore, prefix: &str) -> Result<Self> {
        let find = |name: String| {
            store
                .find(&name)
                .ok_or(CaptionerError::MissingTensor(name.clone()))
        };
        let mut stages = Vec::with_capacity(4);
        for i in 1..=4 {
            stages.push((
                find(format!("{prefix}.c{i}.w"))?,
                find(format!("{prefix}.c{i}.gamma"))?,
                find(format!("{prefix}.c{i}.beta"))?,
            ));
        }
        Ok(Self { store, stages })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

fn check_image_size(h: usize, w: usize) -> Result<()> {
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(CaptionerError::ImageTooSmall {
            height: h,
            width: w,
        });
    }
    Ok(())
}

/// Wires the trunk into an existing graph. `image` is a `[1,3,H,W]` tensor
/// with H, W ≥ [`MIN_IMAGE_SIDE`]; the result is the `[L, D]` feature grid.
pub fn encode_graph<T: Element>(
    g: &mut Graph<T>,
    enc: &EncoderModel,
    binding: &Binding,
    image: TensorId,
) -> Result<TensorId> {
    let dims = g.shape(image).dims().to_vec();
    if dims.len() != 4 || dims[0] != 1 || dims[1] != 3 {
        return Err(GradError::ShapeMismatch {
            op: "encode",
            detail: format!("expected [1,3,H,W] image, got {dims:?}"),
        }
        .into());
    }
    check_image_size(dims[2], dims[3])?;
    let mut cur = image;
    for &(w, gamma, beta) in &enc.stages {
        let conv = g.conv2d(cur, binding.id(w), 2, 1)?;
        let (normed, _) = g.batch_norm(
            conv,
            binding.id(gamma),
            binding.id(beta),
            None,
            true,
            BN_EPS,
        )?;
        cur = g.relu(normed);
    }
    let pooled = g.adaptive_avg_pool(cur, GRID, GRID)?;
    // [1, D, GRID, GRID] is channel-major, so collapsing the spatial axes
    // gives one row per channel; transposing yields one row per position.
    let by_channel = g.reshape(pooled, &[FEATURE_DIM, GRID * GRID])?;
    Ok(g.transpose2(by_channel)?)
}

/// Runs a frozen trunk over one image.
pub fn encode(image: &Image, enc: &EncoderModel) -> Result<FeatureGrid> {
    let (h, w) = (image.height(), image.width());
    check_image_size(h, w)?;
    let mut g: Graph<f32> = Graph::new();
    let binding = enc.store.bind(&mut g, true);
    let x = g.leaf(Shape::new(&[1, 3, h, w]), image.data().to_vec(), false)?;
    let grid = encode_graph(&mut g, enc, &binding, x)?;
    Ok(FeatureGrid {
        grid_h: GRID,
        grid_w: GRID,
        dim: FEATURE_DIM,
        data: g.data(grid).to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Additive attention: `score_i = v·relu(a_i·W_a + h·W_h + b)`, weights by
/// softmax over the L scores.
#[derive(Debug, Clone)]
pub struct AttentionModel {
    store: ParamStore,
    wa: ParamId,
    wh: ParamId,
    b: ParamId,
    v: ParamId,
}

impl AttentionModel {
    /// Fresh projections under names `{prefix}.{wa,wh,b,v}`.
    pub fn init(prefix: &str, dims: &CaptionerDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = dims.attention_dim;
        let wa = store.add_normal(
            &format!("{prefix}.wa"),
            Shape::new(&[FEATURE_DIM, k]),
            (2.0 / FEATURE_DIM as f32).sqrt(),
            &mut rng,
        );
        let wh = store.add_normal(
            &format!("{prefix}.wh"),
            Shape::new(&[dims.hidden_dim, k]),
            (2.0 / dims.hidden_dim as f32).sqrt(),
            &mut rng,
        );
        let b = store.add_zeros(&format!("{prefix}.b"), Shape::new(&[k]), true);
        let v = store.add_normal(
            &format!("{prefix}.v"),
            Shape::new(&[k, 1]),
            (1.0 / k as f32).sqrt(),
            &mut rng,
        );
        Self {
            store,
            wa,
            wh,
            b,
            v,
        }
    }

    /// Rebuilds the handle structure over a store loaded from a checkpoint.
    pub fn from_store(store: ParamStore, prefix: &str) -> Result<Self> {
        let find = |name: String| {
            store
                .find(&name)
                .ok_or(CaptionerError::MissingTensor(name.clone()))
        };
        Ok(Self {
            wa: find(format!("{prefix}.wa"))?,
            wh: find(format!("{prefix}.wh"))?,
            b: find(format!("{prefix}.b"))?,
            v: find(format!("{prefix}.v"))?,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Scores the grid against the previous hidden state inside an existing
/// graph; returns the context vector `[1,D]` and the weights `[L,1]`.
pub fn attend_graph<T: Element>(
    g: &mut Graph<T>,
    att: &AttentionModel,
    binding: &Binding,
    grid: TensorId,
    h_prev: TensorId,
) -> Result<(TensorId, TensorId)> {
    let pa = g.matmul(grid, binding.id(att.wa))?;
    let ph = g.matmul(h_prev, binding.id(att.wh))?;
    let summed = g.add(pa, ph)?;
    let biased = g.add(summed, binding.id(att.b))?;
    let hidden = g.relu(biased);
    let scores = g.matmul(hidden, binding.id(att.v))?;
    let alpha = g.softmax(scores, 0)?;
    let alpha_row = g.transpose2(alpha)?;
    let context = g.matmul(alpha_row, grid)?;
    Ok((context, alpha))
}

/// Frozen single-shot attention over a concrete grid and hidden state.
pub fn attend(
    grid: &FeatureGrid,
    h_prev: &[f32],
    att: &AttentionModel,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut g: Graph<f32> = Graph::new();
    let binding = att.store.bind(&mut g, true);
    let a = g.leaf(
        Shape::new(&[grid.len(), grid.dim]),
        grid.data.clone(),
        false,
    )?;
    let h = g.leaf(Shape::new(&[1, h_prev.len()]), h_prev.to_vec(), false)?;
    let (context, alpha) = attend_graph(&mut g, att, &binding, a, h)?;
    Ok((g.data(context).to_vec(), g.data(alpha).to_vec()))
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Embedding, LSTM cell, state initialisers, and the deep output layer.
#[derive(Debug, Clone)]
pub struct DecoderModel {
    store: ParamStore,
    emb: ParamId,
    h0: (ParamId, ParamId),
    c0: (ParamId, ParamId),
    /// Gate order: input, forget, output, candidate.
    wx: [ParamId; 4],
    wh: [ParamId; 4],
    b: [ParamId; 4],
    out: (ParamId, ParamId),
    vocab_size: usize,
}

const GATES: [&str; 4] = ["i", "f", "o", "g"];

impl DecoderModel {
    /// Fresh decoder for `vocab_size` ids under names `{prefix}.emb`,
    /// `{prefix}.{h0,c0}.{w,b}`, `{prefix}.{wx,wh,b}_{i,f,o,g}`, and
    /// `{prefix}.out.{w,b}`. The forget-gate bias starts at 1.0 so early
    /// training favours remembering.
    pub fn init(prefix: &str, vocab_size: usize, dims: &CaptionerDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, m) = (dims.hidden_dim, dims.embed_dim);
        let x_dim = m + FEATURE_DIM;
        let emb = store.add_normal(
            &format!("{prefix}.emb"),
            Shape::new(&[vocab_size, m]),
            0.1,
            &mut rng,
        );
        let mut init_pair = |name: &str| {
            let w = store.add_normal(
                &format!("{prefix}.{name}.w"),
                Shape::new(&[FEATURE_DIM, h]),
                (1.0 / FEATURE_DIM as f32).sqrt(),
                &mut rng,
            );
            let b = store.add_zeros(&format!("{prefix}.{name}.b"), Shape::new(&[h]), true);
            (w, b)
        };
        let h0 = init_pair("h0");
        let c0 = init_pair("c0");
        let mut wx = Vec::with_capacity(4);
        let mut wh = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for gate in GATES {
            wx.push(store.add_normal(
                &format!("{prefix}.wx_{gate}"),
                Shape::new(&[x_dim, h]),
                (1.0 / x_dim as f32).sqrt(),
                &mut rng,
            ));
        }
        for gate in GATES {
            wh.push(store.add_normal(
                &format!("{prefix}.wh_{gate}"),
                Shape::new(&[h, h]),
                (1.0 / h as f32).sqrt(),
                &mut rng,
            ));
        }
        for gate in GATES {
            let bias = if gate == "f" { 1.0 } else { 0.0 };
            b.push(store.add_full(&format!("{prefix}.b_{gate}"), Shape::new(&[h]), bias, true));
        }
        let out_in = m + FEATURE_DIM + h;
        let out_w = store.add_normal(
            &format!("{prefix}.out.w"),
            Shape::new(&[out_in, vocab_size]),
            (1.0 / out_in as f32).sqrt(),
            &mut rng,
        );
        let out_b = store.add_zeros(&format!("{prefix}.out.b"), Shape::new(&[vocab_size]), true);
        Self {
            store,
            emb,
            h0,
            c0,
            wx: [wx[0], wx[1], wx[2], wx[3]],
            wh: [wh[0], wh[1], wh[2], wh[3]],
            b: [b[0], b[1], b[2], b[3]],
            out: (out_w, out_b),
            vocab_size,
        }
    }

    /// Rebuilds the handle structure over a store loaded from a checkpoint.
    pub fn from_store(store: ParamStore, prefix: &str) -> Result<Self> {
        let find = |name: String| {
            store
                .find(&name)
                .ok_or(CaptionerError::MissingTensor(name.clone()))
        };
        let emb = find(format!("{prefix}.emb"))?;
        let vocab_size = store.shape(emb).dims()[0];
        let gates = |stem: &str| -> Result<[ParamId; 4]> {
            let mut ids = Vec::with_capacity(4);
            for gate in GATES {
                ids.push(find(format!("{prefix}.{stem}_{gate}"))?);
            }
            Ok([ids[0], ids[1], ids[2], ids[3]])
        };
        let wx = gates("wx")?;
        let wh = gates("wh")?;
        let b = gates("b")?;
        Ok(Self {
            emb,
            h0: (
                find(format!("{prefix}.h0.w"))?,
                find(format!("{prefix}.h0.b"))?,
            ),
            c0: (
                find(format!("{prefix}.c0.w"))?,
                find(format!("{prefix}.c0.b"))?,
            ),
            wx,
            wh,
            b,
            out: (
                find(format!("{prefix}.out.w"))?,
                find(format!("{prefix}.out.b"))?,
            ),
            vocab_size,
            store,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Maps the mean feature vector through separate `linear → tanh` layers to
/// the initial hidden and cell states, both `[1,H]`.
pub fn init_state_graph<T: Element>(
    g: &mut Graph<T>,
    dec: &DecoderModel,
    binding: &Binding,
    grid: TensorId,
) -> Result<(TensorId, TensorId)> {
    let l = g.shape(grid).dims()[0];
    let ones = g.constant(
        Shape::new(&[1, l]),
        vec![crate::gradcore::elem(1.0 / l as f64); l],
    )?;
    let mean = g.matmul(ones, grid)?;
    let mut half = |pair: (ParamId, ParamId)| -> Result<TensorId> {
        let lin = g.matmul(mean, binding.id(pair.0))?;
        let biased = g.add(lin, binding.id(pair.1))?;
        Ok(g.tanh(biased))
    };
    let h = half(dec.h0)?;
    let c = half(dec.c0)?;
    Ok((h, c))
}

/// One decoding step inside an existing graph: embeds `y_prev`, feeds the
/// LSTM cell with `concat(embedding, context)`, and maps
/// `concat(embedding, context, hidden)` to vocabulary logits. Returns
/// `(logits [1,V], h [1,H], c [1,H])`.
pub fn decode_step_graph<T: Element>(
    g: &mut Graph<T>,
    dec: &DecoderModel,
    binding: &Binding,
    y_prev: usize,
    context: TensorId,
    h: TensorId,
    c: TensorId,
) -> Result<(TensorId, TensorId, TensorId)> {
    let e = g.embedding(binding.id(dec.emb), &[y_prev])?;
    let x = g.concat(&[e, context], 1)?;
    let mut gate = |idx: usize| -> Result<TensorId> {
        let from_x = g.matmul(x, binding.id(dec.wx[idx]))?;
        let from_h = g.matmul(h, binding.id(dec.wh[idx]))?;
        let s = g.add(from_x, from_h)?;
        Ok(g.add(s, binding.id(dec.b[idx]))?)
    };
    let (pi, pf, po, pg) = (gate(0)?, gate(1)?, gate(2)?, gate(3)?);
    let i = g.sigmoid(pi);
    let f = g.sigmoid(pf);
    let o = g.sigmoid(po);
    let cand = g.tanh(pg);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    let deep = g.concat(&[e, context, h_next], 1)?;
    let lin = g.matmul(deep, binding.id(dec.out.0))?;
    let logits = g.add(lin, binding.id(dec.out.1))?;
    Ok((logits, h_next, c_next))
}

/// Frozen single-shot state initialisation from a concrete grid.
pub fn init_state(grid: &FeatureGrid, dec: &DecoderModel) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut g: Graph<f32> = Graph::new();
    let binding = dec.store.bind(&mut g, true);
    let a = g.leaf(
        Shape::new(&[grid.len(), grid.dim]),
        grid.data.clone(),
        false,
    )?;
    let (h, c) = init_state_graph(&mut g, dec, &binding, a)?;
    Ok((g.data(h).to_vec(), g.data(c).to_vec()))
}

/// Frozen single decoding step over concrete vectors.
pub fn decode_step(
    y_prev: usize,
    context: &[f32],
    state: (&[f32], &[f32]),
    dec: &DecoderModel,
) -> Result<(Vec<f32>, (Vec<f32>, Vec<f32>))> {
    let mut g: Graph<f32> = Graph::new();
    let binding = dec.store.bind(&mut g, true);
    let z = g.leaf(Shape::new(&[1, context.len()]), context.to_vec(), false)?;
    let h = g.leaf(Shape::new(&[1, state.0.len()]), state.0.to_vec(), false)?;
    let c = g.leaf(Shape::new(&[1, state.1.len()]), state.1.to_vec(), false)?;
    let (logits, h_next, c_next) = decode_step_graph(&mut g, dec, &binding, y_prev, z, h, c)?;
    Ok((
        g.data(logits).to_vec(),
        (g.data(h_next).to_vec(), g.data(c_next).to_vec()),
    ))
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

/// Encoder, attention, decoder, and the vocabulary they were trained with.
#[derive(Debug, Clone)]
pub struct CaptionerModel {
    pub vocab: Vocabulary,
    pub dims: CaptionerDims,
    pub enc: EncoderModel,
    pub att: AttentionModel,
    pub dec: DecoderModel,
}

impl CaptionerModel {
    /// Fresh jointly-trainable stack under checkpoint prefixes `cap.enc`,
    /// `cap.att`, `cap.dec`.
    pub fn init(vocab: Vocabulary, dims: CaptionerDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderModel::init("cap.enc", rng.gen());
        let att = AttentionModel::init("cap.att", &dims, rng.gen());
        let dec = DecoderModel::init("cap.dec", vocab.len(), &dims, rng.gen());
        Ok(Self {
            vocab,
            dims,
            enc,
            att,
            dec,
        })
    }
}

/// Builds the teacher-forced logits chain for one sample inside an existing
/// graph; returns the `[steps, V]` logits node.
fn teacher_forced_logits_graph<T: Element>(
    g: &mut Graph<T>,
    model: &CaptionerModel,
    bindings: (&Binding, &Binding, &Binding),
    image_node: TensorId,
    ids: &[usize],
) -> Result<TensorId> {
    let (be, ba, bd) = bindings;
    let grid = encode_graph(g, &model.enc, be, image_node)?;
    let (mut h, mut c) = init_state_graph(g, &model.dec, bd, grid)?;
    let mut rows = Vec::with_capacity(ids.len() - 1);
    for t in 1..ids.len() {
        let (context, _) = attend_graph(g, &model.att, ba, grid, h)?;
        let (logits, h_next, c_next) =
            decode_step_graph(g, &model.dec, bd, ids[t - 1], context, h, c)?;
        rows.push(logits);
        h = h_next;
        c = c_next;
    }
    Ok(g.concat(&rows, 0)?)
}

fn image_leaf<T: Element>(g: &mut Graph<T>, image: &Image) -> Result<TensorId> {
    let (h, w) = (image.height(), image.width());
    let data = image
        .data()
        .iter()
        .map(|&v| crate::gradcore::elem::<T>(v as f64))
        .collect();
    Ok(g.leaf(Shape::new(&[1, 3, h, w]), data, false)?)
}

/// Training schedule for the captioning stack.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTrainConfig {
    /// Samples per optimisation step.
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f32,
}

impl CaptionTrainConfig {
    /// Small configuration sized for tests and laptop runs.
    pub fn desk() -> Self {
        Self {
            batch: 4,
            epochs: 250,
            learning_rate: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(CaptionerError::InvalidConfig(
                "batch and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CaptionerError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A trained stack plus its per-epoch mean training loss (cross-entropy per
/// token).
#[derive(Debug, Clone)]
pub struct CaptionTrainOutcome {
    pub model: CaptionerModel,
    pub loss_history: Vec<f32>,
}

fn validate_pairs(pairs: &[(Image, CaptionSample)], model: &CaptionerModel) -> Result<()> {
    if pairs.is_empty() {
        return Err(CaptionerError::EmptyDataset);
    }
    for (image, cap) in pairs {
        check_image_size(image.height(), image.width())?;
        if cap.ids.len() > model.dims.max_len
            || cap.ids.first() != Some(&START)
            || cap.ids.last() != Some(&END)
        {
            return Err(CaptionerError::InvalidConfig(format!(
                "caption for {} is not start/end framed within {} ids",
                cap.image_id, model.dims.max_len
            )));
        }
        if let Some(&bad) = cap.ids.iter().find(|&&id| id >= model.vocab.len()) {
            return Err(CaptionerError::InvalidConfig(format!(
                "caption for {} uses id {bad} outside the {}-entry vocabulary",
                cap.image_id,
                model.vocab.len()
            )));
        }
    }
    Ok(())
}

/// Teacher-forced joint training: at step t the ground-truth previous token
/// is fed, the batch's summed cross-entropy is normalised by its token
/// count, and one Adam update is applied to encoder, attention, and decoder
/// together. Deterministic for a fixed `(pairs, model, cfg, seed)`.
pub fn train_captioner(
    pairs: &[(Image, CaptionSample)],
    model: CaptionerModel,
    cfg: &CaptionTrainConfig,
    seed: u64,
) -> Result<CaptionTrainOutcome> {
    cfg.validate()?;
    validate_pairs(pairs, &model)?;
    let mut model = model;
    let adam = |lr: f32| AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut opt_enc = OptimizerState::new(&model.enc.store, adam(cfg.learning_rate));
    let mut opt_att = OptimizerState::new(&model.att.store, adam(cfg.learning_rate));
    let mut opt_dec = OptimizerState::new(&model.dec.store, adam(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0CA7_10B5);
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch);
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        for _ in 0..steps_per_epoch {
            let mut g: Graph<f32> = Graph::new();
            let be = model.enc.store.bind(&mut g, false);
            let ba = model.att.store.bind(&mut g, false);
            let bd = model.dec.store.bind(&mut g, false);
            let mut pooled: Option<TensorId> = None;
            let mut tokens = 0usize;
            for _ in 0..cfg.batch {
                let (image, cap) = &pairs[rng.gen_range(0..pairs.len())];
                let x = image_leaf(&mut g, image)?;
                let logits =
                    teacher_forced_logits_graph(&mut g, &model, (&be, &ba, &bd), x, &cap.ids)?;
                let ce = g.cross_entropy_sum(logits, &cap.ids[1..])?;
                pooled = Some(match pooled {
                    Some(acc) => g.add(acc, ce)?,
                    None => ce,
                });
                tokens += cap.steps();
            }
            let total = pooled.expect("batch is positive");
            let loss = g.scale(total, 1.0 / tokens as f64);
            g.backward(loss)?;
            let ge = be.grads(&mut g, &model.enc.store);
            let ga = ba.grads(&mut g, &model.att.store);
            let gd = bd.grads(&mut g, &model.dec.store);
            opt_enc.step(&mut model.enc.store, &ge)?;
            opt_att.step(&mut model.att.store, &ga)?;
            opt_dec.step(&mut model.dec.store, &gd)?;
            epoch_loss += g.value(loss) as f64;
        }
        history.push((epoch_loss / steps_per_epoch as f64) as f32);
    }
    Ok(CaptionTrainOutcome {
        model,
        loss_history: history,
    })
}

/// Fraction of teacher-forced steps whose argmax logit is the ground-truth
/// token, over the whole set.
pub fn teacher_forced_accuracy(
    pairs: &[(Image, CaptionSample)],
    model: &CaptionerModel,
) -> Result<f64> {
    validate_pairs(pairs, model)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (image, cap) in pairs {
        let mut g: Graph<f32> = Graph::new();
        let be = model.enc.store.bind(&mut g, true);
        let ba = model.att.store.bind(&mut g, true);
        let bd = model.dec.store.bind(&mut g, true);
        let x = image_leaf(&mut g, image)?;
        let logits = teacher_forced_logits_graph(&mut g, model, (&be, &ba, &bd), x, &cap.ids)?;
        let v = model.vocab.len();
        let data = g.data(logits);
        for (t, &want) in cap.ids[1..].iter().enumerate() {
            let row = &data[t * v..(t + 1) * v];
            if argmax(row) == want {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// First index of the maximum value; ties resolve to the lowest id.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Natural-log softmax of a logits row, computed in double precision.
fn log_softmax(row: &[f32]) -> Vec<f64> {
    let mx = row
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, |a, v| a.max(v as f64));
    let lse = mx
        + row
            .iter()
            .map(|&v| ((v as f64) - mx).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Strips reserved ids and renders the rest through the vocabulary.
fn render(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| id != PAD && id != START && id != END)
        .map(|&id| {
            vocab
                .token(id)
                .expect("decoded ids are always in range")
                .to_string()
        })
        .collect()
}

/// Greedy decoding: start token, then repeatedly attend and take the argmax
/// until the end token or the step bound. Returns tokens without the
/// reserved framing ids.
pub fn caption_greedy(image: &Image, model: &CaptionerModel) -> Result<Vec<String>> {
    let (ids, _) = beam_rollout(image, model, 1)?;
    Ok(render(&ids, &model.vocab))
}

/// Greedy decoding from a caller-supplied feature grid, for pipelines that
/// route features through a different trunk than `model.enc` while keeping
/// the same attention and decoder.
pub fn caption_greedy_from_grid(grid: &FeatureGrid, model: &CaptionerModel) -> Result<Vec<String>> {
    let (ids, _) = beam_rollout_grid(grid, model, 1)?;
    Ok(render(&ids, &model.vocab))
}

/// Length-normalised beam search over token sequences. Width 1 is exactly
/// greedy decoding; wider beams additionally run the greedy rollout and
/// never return a sequence scoring below it. Ties break toward the
/// lexicographically smaller id sequence.
pub fn caption_beam(image: &Image, model: &CaptionerModel, width: usize) -> Result<Vec<String>> {
    if width == 0 {
        return Err(CaptionerError::BadBeamWidth);
    }
    let mut best = beam_rollout(image, model, width)?;
    if width > 1 {
        let greedy = beam_rollout(image, model, 1)?;
        if greedy.1 > best.1 || (greedy.1 == best.1 && greedy.0 < best.0) {
            best = greedy;
        }
    }
    Ok(render(&best.0, &model.vocab))
}

/// A live or finished hypothesis during beam search.
struct Hypothesis {
    ids: Vec<usize>,
    log_prob: f64,
    state: (Vec<f32>, Vec<f32>),
}

impl Hypothesis {
    /// Log probability per generated token (the end token counts).
    fn normalized(&self) -> f64 {
        let steps = self.ids.len().max(1);
        self.log_prob / steps as f64
    }
}

/// Runs beam search and returns the winning id sequence (without framing)
/// and its length-normalised log probability.
fn beam_rollout(image: &Image, model: &CaptionerModel, width: usize) -> Result<(Vec<usize>, f64)> {
    let grid = encode(image, &model.enc)?;
    beam_rollout_grid(&grid, model, width)
}

fn beam_rollout_grid(
    grid: &FeatureGrid,
    model: &CaptionerModel,
    width: usize,
) -> Result<(Vec<usize>, f64)> {
    let (h0, c0) = init_state(grid, &model.dec)?;
    let mut alive = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        state: (h0, c0),
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..model.dims.max_len {
        // The state transition consumes only the previous token, so every
        // expansion of one hypothesis shares the same advanced state.
        let mut advanced = Vec::with_capacity(alive.len());
        // (normalised score, summed log prob, token, source index).
        let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (src, hyp) in alive.iter().enumerate() {
            let y_prev = hyp.ids.last().copied().unwrap_or(START);
            let (context, _) = attend(grid, &hyp.state.0, &model.att)?;
            let (logits, state) =
                decode_step(y_prev, &context, (&hyp.state.0, &hyp.state.1), &model.dec)?;
            advanced.push(state);
            for (token, token_lp) in log_softmax(&logits).into_iter().enumerate() {
                let total = hyp.log_prob + token_lp;
                let norm = total / (hyp.ids.len() + 1) as f64;
                candidates.push((norm, total, token, src));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("log probabilities are finite")
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::with_capacity(width);
        for &(norm, total, token, src) in candidates.iter().take(width) {
            let mut ids = alive[src].ids.clone();
            ids.push(token);
            if token == END {
                finished.push((ids[..ids.len() - 1].to_vec(), norm));
            } else {
                next.push(Hypothesis {
                    ids,
                    log_prob: total,
                    state: advanced[src].clone(),
                });
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    for hyp in &alive {
        finished.push((hyp.ids.clone(), hyp.normalized()));
    }
    finished.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("log probabilities are finite")
            .then(a.0.cmp(&b.0))
    });
    Ok(finished
        .first()
        .cloned()
        .expect("at least the empty hypothesis survives"))
}
