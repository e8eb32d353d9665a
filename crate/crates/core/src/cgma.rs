//! Cross-guided multimodal attention.
//!
//! Guided attention takes queries from a target feature and keys/values from
//! a guide feature. Blocks run `L` such layers in parallel and project their
//! concatenation. The progressive update first lets text and question diagram
//! guide each other, then guides the instructional diagram with their fusion.
//!
//! All forward functions record onto a [`Tape`] and read parameters from a
//! slice of bound [`Var`]s indexed by [`ParamId`].

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::numerics::{
    grad_check, GradCheckReport, Matrix, NumericsError, ParamId, ParamStore, Tape, Var,
    DEFAULT_GRAD_CHECK_EPS, LAYER_NORM_EPS,
};
use crate::scalar::{cast, to_f64, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum CgmaError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("image {height}x{width} does not divide into a {grid}x{grid} patch grid; resize to a multiple of {grid} such as {suggest}x{suggest}")]
    NotDivisible {
        height: usize,
        width: usize,
        grid: usize,
        suggest: usize,
    },
    #[error("pixel buffer holds {got} values, expected {expected}")]
    BadPixels { got: usize, expected: usize },
    #[error("{what} must be {expected:?}, got {got:?}")]
    BadShape {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("DMC record has no instructional diagram; set model.zero_id_placeholder (CLI: --zero-id) to use an all-zero feature")]
    MissingInstructionalDiagram,
    #[error("token id {id} >= vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("no attention weights captured; run a forward pass first")]
    NoCapture,
    #[error("diagram `{reference}`: {message}")]
    Diagram { reference: String, message: String },
    #[error("block needs at least one layer")]
    NoLayers,
}

/// Seeded parameter initializer: weights uniform in ±1/√fan_in, layer-norm
/// gains one, biases zero.
pub struct ParamInit<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> ParamInit<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let m = Matrix::uniform(rows, cols, bound, &mut self.rng);
        self.store.add(name, m)
    }

    /// Uniform in `±bound` regardless of shape.
    pub fn uniform_bounded(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
    ) -> ParamId {
        let m = Matrix::uniform(rows, cols, bound, &mut self.rng);
        self.store.add(name, m)
    }

    pub fn filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.store
            .add(name, Matrix::filled(rows, cols, cast(value)))
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// One guided-attention layer: heads, output projection, feedforward and two
/// layer norms.
#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub heads: Vec<HeadParams>,
    pub wh: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2: (ParamId, ParamId),
    pub head_dim: usize,
}

impl AttnLayer {
    pub fn init<T: Scalar>(
        init: &mut ParamInit<'_, T>,
        prefix: &str,
        d: usize,
        heads: usize,
        head_dim: usize,
    ) -> Self {
        let heads = (0..heads)
            .map(|h| HeadParams {
                wq: init.uniform(format!("{prefix}.h{h}.wq"), d, head_dim),
                wk: init.uniform(format!("{prefix}.h{h}.wk"), d, head_dim),
                wv: init.uniform(format!("{prefix}.h{h}.wv"), d, head_dim),
            })
            .collect::<Vec<_>>();
        let wh = init.uniform(format!("{prefix}.wh"), heads.len() * head_dim, d);
        let ln1 = (
            init.filled(format!("{prefix}.ln1.gamma"), 1, d, 1.0),
            init.filled(format!("{prefix}.ln1.beta"), 1, d, 0.0),
        );
        let ff_w1 = init.uniform(format!("{prefix}.ff.w1"), d, 4 * d);
        let ff_b1 = init.filled(format!("{prefix}.ff.b1"), 1, 4 * d, 0.0);
        let ff_w2 = init.uniform(format!("{prefix}.ff.w2"), 4 * d, d);
        let ff_b2 = init.filled(format!("{prefix}.ff.b2"), 1, d, 0.0);
        let ln2 = (
            init.filled(format!("{prefix}.ln2.gamma"), 1, d, 1.0),
            init.filled(format!("{prefix}.ln2.beta"), 1, d, 0.0),
        );
        Self {
            heads,
            wh,
            ln1,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
            ln2,
            head_dim,
        }
    }
}

/// `L` paralleled layers and their projection `W^L`.
#[derive(Clone, Debug)]
pub struct Block {
    pub layers: Vec<AttnLayer>,
    pub wl: ParamId,
}

impl Block {
    pub fn init<T: Scalar>(init: &mut ParamInit<'_, T>, prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|l| {
                AttnLayer::init(
                    init,
                    &format!("{prefix}.l{l}"),
                    d,
                    cfg.heads,
                    cfg.head_dim(),
                )
            })
            .collect::<Vec<_>>();
        let wl = init.uniform(format!("{prefix}.wl"), layers.len() * d, d);
        Self { layers, wl }
    }
}

#[derive(Clone, Debug)]
pub struct CgmaParams {
    /// Question diagram guided by text.
    pub qd_by_text: Block,
    /// Text guided by question diagram.
    pub text_by_qd: Block,
    /// Instructional diagram guided by the fused text/question-diagram feature.
    pub id_by_fused: Block,
    pub w_fuse: ParamId,
    /// `P×N` sequence alignment.
    pub align: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
}

impl CgmaParams {
    pub fn init<T: Scalar>(init: &mut ParamInit<'_, T>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            qd_by_text: Block::init(init, "cgma.qd", cfg),
            text_by_qd: Block::init(init, "cgma.text", cfg),
            id_by_fused: Block::init(init, "cgma.id", cfg),
            w_fuse: init.uniform("cgma.fuse", 2 * d, d),
            align: init.uniform("cgma.align", cfg.num_patches(), cfg.seq_len),
            patch_w: init.uniform("cgma.patch.w", cfg.patch_dim(), d),
            patch_b: init.filled("cgma.patch.b", 1, d, 0.0),
        }
    }
}

/// Token embedding table followed by self-attention blocks.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub blocks: Vec<AttnLayer>,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn init<T: Scalar>(
        init: &mut ParamInit<'_, T>,
        cfg: &ModelConfig,
        vocab_size: usize,
    ) -> Self {
        // unit variance, on the scale of the position encodings
        let embed = init.uniform_bounded("enc.embed", vocab_size, cfg.d_model, 3f64.sqrt());
        let blocks = (0..cfg.encoder_blocks)
            .map(|e| {
                AttnLayer::init(
                    init,
                    &format!("enc.b{e}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.head_dim(),
                )
            })
            .collect();
        Self {
            embed,
            blocks,
            vocab_size,
        }
    }
}

/// Values recorded by one guided-attention layer.
#[derive(Clone, Debug)]
pub struct AttnTrace {
    pub out: Var,
    /// Per-head softmax weights, keys in canonical order.
    pub weights: Vec<Var>,
    /// Per-head projected values, rows in canonical order.
    pub values: Vec<Var>,
    /// Per-head attention output before `W^H` and the residual.
    pub heads: Vec<Var>,
    /// `key_order[j]` is the guide row that canonical key `j` came from.
    pub key_order: Vec<usize>,
}

/// Guide-row order that depends only on row contents, so sums over keys run
/// in the same order for every permutation of the guide.
fn canonical_order<T: Scalar>(m: &Matrix<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.rows()).collect();
    idx.sort_by(|&a, &b| {
        m.row(a)
            .iter()
            .zip(m.row(b))
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    idx
}

fn expect_cols<T: Scalar>(
    tape: &Tape<T>,
    v: Var,
    what: &'static str,
    rows: Option<usize>,
    cols: usize,
) -> Result<(), CgmaError> {
    let got = tape.shape(v);
    let expected = (rows.unwrap_or(got.0), cols);
    if got != expected {
        return Err(CgmaError::BadShape {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Queries from `target`, keys and values from `guide`, scaled dot-product
/// softmax per head, head concatenation through `W^H`, residual and layer
/// norm, then a GELU feedforward with its own residual and layer norm.
///
/// `key_mask[j] == false` removes guide row `j` from every softmax.
pub fn guided_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    layer: &AttnLayer,
    target: Var,
    guide: Var,
    key_mask: Option<&[bool]>,
) -> Result<AttnTrace, CgmaError> {
    let d = tape.shape(p[layer.wh]).1;
    expect_cols(tape, target, "target", None, d)?;
    expect_cols(tape, guide, "guide", None, d)?;
    if let Some(mask) = key_mask {
        if mask.len() != tape.shape(guide).0 {
            return Err(CgmaError::BadShape {
                what: "key mask",
                expected: (tape.shape(guide).0, 1),
                got: (mask.len(), 1),
            });
        }
    }

    let key_order = canonical_order(tape.value(guide));
    let guide_c = tape.gather_rows(guide, &key_order)?;
    let mask_c: Option<Vec<bool>> = key_mask.map(|m| key_order.iter().map(|&j| m[j]).collect());
    let scale: T = cast(1.0 / (layer.head_dim as f64).sqrt());

    let mut weights = Vec::with_capacity(layer.heads.len());
    let mut values = Vec::with_capacity(layer.heads.len());
    let mut heads = Vec::with_capacity(layer.heads.len());
    for h in &layer.heads {
        let q = tape.matmul(target, p[h.wq])?;
        let k = tape.matmul(guide_c, p[h.wk])?;
        let v = tape.matmul(guide_c, p[h.wv])?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale)?;
        let a = tape.softmax_rows_masked(logits, mask_c.as_deref());
        heads.push(tape.matmul(a, v)?);
        weights.push(a);
        values.push(v);
    }
    let cat = tape.concat_cols(&heads)?;
    let proj = tape.matmul(cat, p[layer.wh])?;
    let res = tape.add(proj, target)?;
    let eps = cast(LAYER_NORM_EPS);
    let h1 = tape.layer_norm(res, p[layer.ln1.0], p[layer.ln1.1], eps)?;
    let ff = tape.linear(h1, p[layer.ff_w1], p[layer.ff_b1])?;
    let ff = tape.gelu(ff);
    let ff = tape.linear(ff, p[layer.ff_w2], p[layer.ff_b2])?;
    let res2 = tape.add(h1, ff)?;
    let out = tape.layer_norm(res2, p[layer.ln2.0], p[layer.ln2.1], eps)?;
    Ok(AttnTrace {
        out,
        weights,
        values,
        heads,
        key_order,
    })
}

#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub out: Var,
    pub layers: Vec<AttnTrace>,
}

/// Runs every layer on the same `(target, guide)` and projects the
/// feature-wise concatenation by `W^L`.
pub fn multi_layer_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    block: &Block,
    target: Var,
    guide: Var,
    key_mask: Option<&[bool]>,
) -> Result<BlockTrace, CgmaError> {
    if block.layers.is_empty() {
        return Err(CgmaError::NoLayers);
    }
    let layers = block
        .layers
        .iter()
        .map(|l| guided_attention(tape, p, l, target, guide, key_mask))
        .collect::<Result<Vec<_>, _>>()?;
    let outs: Vec<Var> = layers.iter().map(|t| t.out).collect();
    let cat = tape.concat_cols(&outs)?;
    let out = tape.matmul(cat, p[block.wl])?;
    Ok(BlockTrace { out, layers })
}

#[derive(Clone, Debug)]
pub struct ProgressTrace {
    pub text: Var,
    pub qd: Var,
    pub id: Var,
    pub fused: Var,
    pub qd_block: BlockTrace,
    pub text_block: BlockTrace,
    pub id_block: BlockTrace,
}

/// Progress I updates text and question diagram from the original inputs;
/// Progress II guides the instructional diagram with their fusion.
pub fn progressive_update<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    params: &CgmaParams,
    f_t: Var,
    f_qd: Var,
    f_id: Var,
    text_mask: Option<&[bool]>,
) -> Result<ProgressTrace, CgmaError> {
    progressive_update_ordered(tape, p, params, [f_t, f_qd, f_id], text_mask, true)
}

pub(crate) fn progressive_update_ordered<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    params: &CgmaParams,
    [f_t, f_qd, f_id]: [Var; 3],
    text_mask: Option<&[bool]>,
    qd_first: bool,
) -> Result<ProgressTrace, CgmaError> {
    let shape = tape.shape(f_t);
    for (v, what) in [
        (f_qd, "question diagram feature"),
        (f_id, "instructional diagram feature"),
    ] {
        if tape.shape(v) != shape {
            return Err(CgmaError::BadShape {
                what,
                expected: shape,
                got: tape.shape(v),
            });
        }
    }
    let (qd_block, text_block) = if qd_first {
        let q = multi_layer_block(tape, p, &params.qd_by_text, f_qd, f_t, text_mask)?;
        let t = multi_layer_block(tape, p, &params.text_by_qd, f_t, f_qd, None)?;
        (q, t)
    } else {
        let t = multi_layer_block(tape, p, &params.text_by_qd, f_t, f_qd, None)?;
        let q = multi_layer_block(tape, p, &params.qd_by_text, f_qd, f_t, text_mask)?;
        (q, t)
    };
    let cat = tape.concat_cols(&[text_block.out, qd_block.out])?;
    let fused = tape.matmul(cat, p[params.w_fuse])?;
    let id_block = multi_layer_block(tape, p, &params.id_by_fused, f_id, fused, None)?;
    Ok(ProgressTrace {
        text: text_block.out,
        qd: qd_block.out,
        id: id_block.out,
        fused,
        qd_block,
        text_block,
        id_block,
    })
}

/// Raw pixels, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, CgmaError> {
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(CgmaError::BadPixels {
                got: pixels.len(),
                expected,
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Clone, Debug)]
pub enum DiagramInput<T> {
    Pixels(Image),
    /// Precomputed `P × patch_dim` patch features.
    Patches(Matrix<T>),
}

/// Cuts `img` into a `grid × grid` partition; row `gy·grid + gx` holds the
/// patch flattened in (y, x, channel) order.
pub fn patchify<T: Scalar>(img: &Image, grid: usize) -> Result<Matrix<T>, CgmaError> {
    if grid == 0
        || !img.height.is_multiple_of(grid)
        || !img.width.is_multiple_of(grid)
        || img.height == 0
        || img.width == 0
    {
        let side = img.height.max(img.width).max(1);
        return Err(CgmaError::NotDivisible {
            height: img.height,
            width: img.width,
            grid,
            suggest: side.div_ceil(grid.max(1)) * grid.max(1),
        });
    }
    let (ph, pw, c) = (img.height / grid, img.width / grid, img.channels);
    let patch_dim = ph * pw * c;
    Ok(Matrix::from_fn(grid * grid, patch_dim, |row, col| {
        let (gy, gx) = (row / grid, row % grid);
        let (y, rest) = (col / (pw * c), col % (pw * c));
        let (x, ch) = (rest / c, rest % c);
        cast(img.pixel(gy * ph + y, gx * pw + x, ch))
    }))
}

/// Linear patch embedding, `P × d`.
pub fn embed_patches<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    params: &CgmaParams,
    input: &DiagramInput<T>,
    grid: usize,
) -> Result<Var, CgmaError> {
    let patches = match input {
        DiagramInput::Pixels(img) => patchify(img, grid)?,
        DiagramInput::Patches(m) => m.clone(),
    };
    let patch_dim = tape.shape(p[params.patch_w]).0;
    if patches.shape() != (grid * grid, patch_dim) {
        return Err(CgmaError::BadShape {
            what: "patch matrix",
            expected: (grid * grid, patch_dim),
            got: patches.shape(),
        });
    }
    let x = tape.constant(patches);
    Ok(tape.linear(x, p[params.patch_w], p[params.patch_b])?)
}

/// `alignᵀ · f`: maps `P` patch rows onto `N` sequence rows.
pub fn project_seq<T: Scalar>(tape: &mut Tape<T>, f: Var, align: Var) -> Result<Var, CgmaError> {
    let at = tape.transpose(align);
    Ok(tape.matmul(at, f)?)
}

/// Embeds and aligns one diagram to `N × d`.
pub fn diagram_feature<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    params: &CgmaParams,
    input: &DiagramInput<T>,
    grid: usize,
) -> Result<Var, CgmaError> {
    let e = embed_patches(tape, p, params, input, grid)?;
    project_seq(tape, e, p[params.align])
}

/// Sinusoidal position table, `n × d`.
pub fn positions<T: Scalar>(n: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(n, d, |pos, i| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        cast(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub out: Var,
    pub blocks: Vec<AttnTrace>,
}

/// Token embeddings plus positions, then self-attention blocks with padding
/// keys masked out.
pub fn encode_text<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    enc: &TextEncoder,
    ids: &[u32],
    key_mask: &[bool],
) -> Result<EncoderTrace, CgmaError> {
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= enc.vocab_size) {
        return Err(CgmaError::TokenOutOfRange {
            id,
            vocab: enc.vocab_size,
        });
    }
    let d = tape.shape(p[enc.embed]).1;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let emb = tape.gather_rows(p[enc.embed], &idx)?;
    let pos = tape.constant(positions(ids.len(), d));
    let mut x = tape.add(emb, pos)?;
    let mut blocks = Vec::with_capacity(enc.blocks.len());
    for layer in &enc.blocks {
        let t = guided_attention(tape, p, layer, x, x, Some(key_mask))?;
        x = t.out;
        blocks.push(t);
    }
    Ok(EncoderTrace { out: x, blocks })
}

/// Source of diagram pixels by reference string.
pub trait DiagramProvider {
    fn load(&self, reference: &str) -> Result<Image, CgmaError>;
}

/// Loads image files below `root` and resizes them to `side × side`.
#[derive(Clone, Debug)]
pub struct ImageDir {
    pub root: PathBuf,
    pub side: usize,
    pub channels: usize,
}

impl DiagramProvider for ImageDir {
    fn load(&self, reference: &str) -> Result<Image, CgmaError> {
        let err = |message: String| CgmaError::Diagram {
            reference: reference.to_string(),
            message,
        };
        let img = image::open(self.root.join(reference)).map_err(|e| err(e.to_string()))?;
        let side = self.side as u32;
        let resized = img.resize_exact(side, side, image::imageops::FilterType::Triangle);
        let bytes = match self.channels {
            1 => resized.to_luma8().into_raw(),
            3 => resized.to_rgb8().into_raw(),
            c => return Err(err(format!("unsupported channel count {c}; use 1 or 3"))),
        };
        Image::new(
            self.side,
            self.side,
            self.channels,
            bytes.into_iter().map(|b| f64::from(b) / 255.0).collect(),
        )
    }
}

/// Deterministic pseudo-images keyed by a hash of the reference.
#[derive(Clone, Debug)]
pub struct SyntheticDiagrams {
    pub side: usize,
    pub channels: usize,
}

impl DiagramProvider for SyntheticDiagrams {
    fn load(&self, reference: &str) -> Result<Image, CgmaError> {
        let digest = Sha256::digest(reference.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.side * self.side * self.channels;
        Image::new(
            self.side,
            self.side,
            self.channels,
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
    }
}

/// Axis of an attention grid to resample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpAxis {
    Query,
    Key,
}

/// Per-head weight grids of one layer as `f64`, keys back in guide order.
pub fn attention_grids<T: Scalar>(tape: &Tape<T>, trace: &AttnTrace) -> Vec<Matrix<f64>> {
    trace
        .weights
        .iter()
        .map(|&w| {
            let a = tape.value(w);
            let mut out = Matrix::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                for (j, &src) in trace.key_order.iter().enumerate() {
                    out.set(i, src, to_f64(a.get(i, j))).expect("finite weight");
                }
            }
            out
        })
        .collect()
}

fn lerp_axis(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    (0..m)
        .map(|i| {
            let pos = if m == 1 {
                0.0
            } else {
                i as f64 * (n - 1) as f64 / (m - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Linear resampling of one axis to `target` entries (end points aligned),
/// then each row is rescaled to sum to one. Equal lengths return the grid
/// unchanged.
pub fn interpolate_grid(grid: &Matrix<f64>, axis: InterpAxis, target: usize) -> Matrix<f64> {
    let (rows, cols) = grid.shape();
    let n = match axis {
        InterpAxis::Query => rows,
        InterpAxis::Key => cols,
    };
    if n == target || n == 0 || target == 0 {
        return grid.clone();
    }
    let taps = lerp_axis(n, target);
    let resampled = match axis {
        InterpAxis::Query => Matrix::from_fn(target, cols, |i, j| {
            let (lo, hi, t) = taps[i];
            (1.0 - t) * grid.get(lo, j) + t * grid.get(hi, j)
        }),
        InterpAxis::Key => Matrix::from_fn(rows, target, |i, j| {
            let (lo, hi, t) = taps[j];
            (1.0 - t) * grid.get(i, lo) + t * grid.get(i, hi)
        }),
    };
    let sums: Vec<f64> = (0..resampled.rows())
        .map(|i| resampled.row(i).iter().sum())
        .collect();
    Matrix::from_fn(resampled.rows(), resampled.cols(), |i, j| {
        if sums[i] > 0.0 {
            resampled.get(i, j) / sums[i]
        } else {
            resampled.get(i, j)
        }
    })
}

/// CSV `head,query_index,key_index,weight` of every grid, optionally
/// resampled along one axis.
pub fn dump_attention(
    grids: &[Matrix<f64>],
    interpolate: Option<(InterpAxis, usize)>,
) -> Result<String, CgmaError> {
    if grids.is_empty() {
        return Err(CgmaError::NoCapture);
    }
    let mut out = String::from("head,query_index,key_index,weight\n");
    for (h, g) in grids.iter().enumerate() {
        let g = match interpolate {
            Some((axis, n)) => interpolate_grid(g, axis, n),
            None => g.clone(),
        };
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                writeln!(out, "{h},{i},{j},{}", g.get(i, j)).expect("string write");
            }
        }
    }
    Ok(out)
}

/// Random `rows × cols` matrix in `[-1, 1)`, for tests and fixtures.
pub fn random_matrix<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Matrix<T> {
    Matrix::uniform(rows, cols, 1.0, rng)
}

/// Central-difference check of every parameter of a progressive update on
/// random `n × d` inputs. The loss is the sum of all four outputs projected
/// onto a fixed random vector.
pub fn gradcheck_progressive(
    n: usize,
    d: usize,
    heads: usize,
    layers: usize,
    seed: u64,
) -> Result<GradCheckReport<f64>, CgmaError> {
    let cfg = ModelConfig {
        seq_len: n,
        d_model: d,
        heads,
        layers,
        grid: 2,
        patch_size: 1,
        channels: 1,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let params = CgmaParams::init(&mut ParamInit::<f64>::new(&mut store, seed), &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let inputs: Vec<Matrix<f64>> = (0..3).map(|_| random_matrix(n, d, &mut rng)).collect();
    let r: Matrix<f64> = random_matrix(d, 1, &mut rng);
    let report = grad_check(
        |tape, p| {
            let v: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
            let tr = progressive_update(tape, p, &params, v[0], v[1], v[2], None)
                .map_err(into_numerics)?;
            let rc = tape.constant(r.clone());
            let mut total = None;
            for out in [tr.text, tr.qd, tr.id, tr.fused] {
                let y = tape.matmul(out, rc)?;
                let s = tape.sum(y)?;
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.expect("four outputs"))
        },
        store.values(),
        DEFAULT_GRAD_CHECK_EPS,
    )?;
    Ok(report)
}

fn into_numerics(e: CgmaError) -> NumericsError {
    match e {
        CgmaError::Numerics(n) => n,
        other => NumericsError::InvalidArgument(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            seq_len: 6,
            d_model: 8,
            heads: 2,
            layers: 2,
            grid: 2,
            patch_size: 1,
            channels: 2,
            ..ModelConfig::default()
        }
    }

    fn layer_store(d: usize, heads: usize, seed: u64) -> (ParamStore<f64>, AttnLayer) {
        let mut store = ParamStore::new();
        let layer = AttnLayer::init(&mut ParamInit::new(&mut store, seed), "t", d, heads, d);
        (store, layer)
    }

    #[test]
    fn single_key_returns_guide_value() {
        let mut store = ParamStore::new();
        let layer = AttnLayer::init(&mut ParamInit::<f64>::new(&mut store, 0), "t", 1, 1, 1);
        for id in [layer.heads[0].wq, layer.heads[0].wk, layer.heads[0].wv] {
            store.set(id, Matrix::identity(1)).unwrap();
        }
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let target = tape.constant(Matrix::from_f64_rows(&[&[0.3]]).unwrap());
        let guide = tape.constant(Matrix::from_f64_rows(&[&[-2.5]]).unwrap());
        let tr = guided_attention(&mut tape, &p, &layer, target, guide, None).unwrap();
        assert_eq!(tape.value(tr.weights[0]).get(0, 0), 1.0);
        assert_eq!(tape.value(tr.heads[0]).get(0, 0), -2.5);
    }

    #[test]
    fn zero_value_weights_reduce_to_layer_norm_then_feedforward() {
        let (mut store, layer) = layer_store(4, 2, 3);
        for h in &layer.heads {
            store.set(h.wv, Matrix::zeros(4, 4)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target: Matrix<f64> = random_matrix(5, 4, &mut rng);
        let guide: Matrix<f64> = random_matrix(5, 4, &mut rng);

        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let (t, g) = (tape.constant(target.clone()), tape.constant(guide));
        let out = guided_attention(&mut tape, &p, &layer, t, g, None)
            .unwrap()
            .out;

        let s = |id: ParamId| store.get(id);
        let h1 = target
            .layer_norm(s(layer.ln1.0), s(layer.ln1.1), LAYER_NORM_EPS)
            .unwrap();
        let ff = h1.linear(s(layer.ff_w1), s(layer.ff_b1)).unwrap().gelu();
        let ff = ff.linear(s(layer.ff_w2), s(layer.ff_b2)).unwrap();
        let expected = h1
            .add(&ff)
            .unwrap()
            .layer_norm(s(layer.ln2.0), s(layer.ln2.1), LAYER_NORM_EPS)
            .unwrap();
        assert_eq!(tape.value(out), &expected);
    }

    #[test]
    fn progress_one_order_is_irrelevant() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let params = CgmaParams::init(&mut ParamInit::<f64>::new(&mut store, 5), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<Matrix<f64>> = (0..3).map(|_| random_matrix(6, 8, &mut rng)).collect();
        let run = |qd_first: bool| {
            let mut tape = Tape::new();
            let p = tape.bind(&store);
            let v: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
            let tr = progressive_update_ordered(
                &mut tape,
                &p,
                &params,
                [v[0], v[1], v[2]],
                None,
                qd_first,
            )
            .unwrap();
            [tr.text, tr.qd, tr.id, tr.fused].map(|x| tape.value(x).clone())
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn zero_inputs_give_constant_rows() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let params = CgmaParams::init(&mut ParamInit::<f64>::new(&mut store, 8), &cfg);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let z: Vec<Var> = (0..3).map(|_| tape.constant(Matrix::zeros(6, 8))).collect();
        let tr = progressive_update(&mut tape, &p, &params, z[0], z[1], z[2], None).unwrap();
        for v in [tr.text, tr.qd, tr.id] {
            let m = tape.value(v);
            for i in 1..m.rows() {
                assert_eq!(m.row(i), m.row(0));
            }
        }
    }

    #[test]
    fn progressive_gradients_small() {
        let r = gradcheck_progressive(3, 4, 2, 1, 1).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn patchify_row_major_grid() {
        let img = Image::new(4, 4, 1, (0..16).map(f64::from).collect()).unwrap();
        let m: Matrix<f64> = patchify(&img, 2).unwrap();
        assert_eq!(m.shape(), (4, 4));
        assert_eq!(m.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(m.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(m.row(3), &[10.0, 11.0, 14.0, 15.0]);
        let err = patchify::<f64>(&Image::zeros(30, 28, 3), 14).unwrap_err();
        assert!(err.to_string().contains("42x42"), "{err}");
    }

    #[test]
    fn interpolation_identity_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_matrix::<f64, _>(5, 7, &mut rng).softmax_rows();
        assert_eq!(interpolate_grid(&g, InterpAxis::Key, 7), g);
        for axis in [InterpAxis::Key, InterpAxis::Query] {
            let r = interpolate_grid(&g, axis, 9);
            for i in 0..r.rows() {
                assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(
            dump_attention(&[], None),
            Err(CgmaError::NoCapture)
        ));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            encoder_blocks: 2,
            ..small_cfg()
        };
        let mut store = ParamStore::new();
        let enc = TextEncoder::init(&mut ParamInit::<f64>::new(&mut store, 11), &cfg, 10);
        let ids = [2u32, 7, 5, 3, 0, 0];
        let mask = [true, true, true, true, false, false];
        let r: Matrix<f64> = random_matrix(8, 1, &mut ChaCha8Rng::seed_from_u64(6));
        let report = grad_check(
            |tape, p| {
                let out = encode_text(tape, p, &enc, &ids, &mask).map_err(into_numerics)?;
                let rc = tape.constant(r.clone());
                let y = tape.matmul(out.out, rc)?;
                tape.sum(y)
            },
            store.values(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
