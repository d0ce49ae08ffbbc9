use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d, conv2d_backward, matmul_nn, matmul_nt, matmul_tn, silu, silu_grad, softplus, upsample2x,
    upsample2x_backward, Conv, Dims, Tensor,
};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::imaging;
use crate::losses::{self, LossReport};
use crate::rng;

/// Architecture of the density counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterConfig {
    /// Image tokens cover `patch x patch` pixels; the decoder upsamples by
    /// the same factor, one 2x stage per entry of `decoder_channels`.
    pub patch: usize,
    pub embed_dim: usize,
    pub encoder_channels: usize,
    pub exemplar_side: usize,
    /// Each exemplar becomes `exemplar_grid^2` tokens.
    pub exemplar_grid: usize,
    pub exemplar_dim: usize,
    pub heads: usize,
    pub fusion_blocks: usize,
    pub decoder_channels: Vec<usize>,
    /// Initial pre-activation of the output layer.
    pub output_bias: f64,
    pub density_scale: f64,
    /// With no exemplars, fusion returns the image tokens unchanged.
    pub allow_empty_exemplars: bool,
    /// Feed the full-resolution encoder features into the last decoder
    /// stage alongside the upsampled fused tokens.
    #[serde(default)]
    pub skip: bool,
    pub seed: u64,
}

impl Default for CounterConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            embed_dim: 32,
            encoder_channels: 8,
            exemplar_side: 64,
            exemplar_grid: 2,
            exemplar_dim: 32,
            heads: 1,
            fusion_blocks: 1,
            decoder_channels: vec![32, 16, 8, 8],
            output_bias: -6.0,
            density_scale: 1.0,
            allow_empty_exemplars: true,
            skip: false,
            seed: 0,
        }
    }
}

impl CounterConfig {
    /// Smallest configuration, for gradient checks on 16x16 inputs.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            encoder_channels: 3,
            exemplar_side: 16,
            exemplar_dim: 6,
            heads: 2,
            decoder_channels: vec![6, 5, 4, 3],
            output_bias: -1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.decoder_channels.len();
        if stages == 0 || self.patch != 1 << stages {
            return Err(Error::Config(format!(
                "patch {} must equal 2^{} (one 2x decoder stage per channel entry)",
                self.patch, stages
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        let half = self.exemplar_side / 2;
        if self.exemplar_side % 2 != 0 || self.exemplar_grid == 0 || half % self.exemplar_grid != 0 {
            return Err(Error::Config(format!(
                "exemplar_side/2 = {half} must be divisible by exemplar_grid {}",
                self.exemplar_grid
            )));
        }
        if self.fusion_blocks == 0 || self.encoder_channels == 0 || self.exemplar_dim == 0 {
            return Err(Error::Config("counter widths and block counts must be positive".into()));
        }
        if !(self.density_scale.is_finite() && self.density_scale > 0.0) {
            return Err(Error::Config("density_scale must be positive".into()));
        }
        Ok(())
    }

    fn exemplar_kernel(&self) -> usize {
        self.exemplar_side / 2 / self.exemplar_grid
    }
}

/// Query/key/value/output projections of one cross-attention block.
/// Keys and values map exemplar tokens to the image embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttentionParams {
    fn init(dim: usize, exemplar_dim: usize, rng: &mut impl Rng) -> Self {
        let d = dim as f64;
        let e = exemplar_dim as f64;
        Self {
            w_q: Tensor::randn(&[dim, dim], 1.0 / d.sqrt(), rng),
            w_k: Tensor::randn(&[dim, exemplar_dim], 1.0 / e.sqrt(), rng),
            w_v: Tensor::randn(&[dim, exemplar_dim], 1.0 / e.sqrt(), rng),
            w_o: Tensor::randn(&[dim, dim], 0.5 / d.sqrt(), rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_q: self.w_q.zeros_like(),
            w_k: self.w_k.zeros_like(),
            w_v: self.w_v.zeros_like(),
            w_o: self.w_o.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape[0]
    }

    pub fn exemplar_dim(&self) -> usize {
        self.w_k.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterParams {
    pub image_conv: Conv,
    pub image_patch: Conv,
    pub exemplar_conv: Conv,
    pub exemplar_patch: Conv,
    pub fusion: Vec<AttentionParams>,
    pub decoder: Vec<Conv>,
    pub head: Conv,
}

impl CounterParams {
    pub fn init(config: &CounterConfig) -> Self {
        let mut rng = rng::stream(config.seed, &[rng::hash_str("counter-init")]);
        let c = config.encoder_channels;
        let mut decoder = Vec::new();
        let mut c_in = config.embed_dim;
        let stages = config.decoder_channels.len();
        for (i, &c_out) in config.decoder_channels.iter().enumerate() {
            let extra = if config.skip && i + 1 == stages { c } else { 0 };
            decoder.push(Conv::init(c_out, c_in + extra, 3, &mut rng));
            c_in = c_out;
        }
        let mut head = Conv::init(1, c_in, 1, &mut rng);
        head.weight.data.iter_mut().for_each(|w| *w *= 0.1);
        head.bias.data[0] = config.output_bias;
        Self {
            image_conv: Conv::init(c, 3, 3, &mut rng),
            image_patch: Conv::init(config.embed_dim, c, config.patch, &mut rng),
            exemplar_conv: Conv::init(c, 3, 3, &mut rng),
            exemplar_patch: Conv::init(config.exemplar_dim, c, config.exemplar_kernel(), &mut rng),
            fusion: (0..config.fusion_blocks)
                .map(|_| AttentionParams::init(config.embed_dim, config.exemplar_dim, &mut rng))
                .collect(),
            decoder,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image_conv: self.image_conv.zeros_like(),
            image_patch: self.image_patch.zeros_like(),
            exemplar_conv: self.exemplar_conv.zeros_like(),
            exemplar_patch: self.exemplar_patch.zeros_like(),
            fusion: self.fusion.iter().map(AttentionParams::zeros_like).collect(),
            decoder: self.decoder.iter().map(Conv::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Tensors in checkpoint order, paired with [`CounterParams::names`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.image_conv.weight,
            &self.image_conv.bias,
            &self.image_patch.weight,
            &self.image_patch.bias,
            &self.exemplar_conv.weight,
            &self.exemplar_conv.bias,
            &self.exemplar_patch.weight,
            &self.exemplar_patch.bias,
        ];
        for b in &self.fusion {
            v.extend([&b.w_q, &b.w_k, &b.w_v, &b.w_o]);
        }
        for c in &self.decoder {
            v.extend([&c.weight, &c.bias]);
        }
        v.extend([&self.head.weight, &self.head.bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Self {
            image_conv,
            image_patch,
            exemplar_conv,
            exemplar_patch,
            fusion,
            decoder,
            head,
        } = self;
        let mut v = vec![
            &mut image_conv.weight,
            &mut image_conv.bias,
            &mut image_patch.weight,
            &mut image_patch.bias,
            &mut exemplar_conv.weight,
            &mut exemplar_conv.bias,
            &mut exemplar_patch.weight,
            &mut exemplar_patch.bias,
        ];
        for b in fusion.iter_mut() {
            v.extend([&mut b.w_q, &mut b.w_k, &mut b.w_v, &mut b.w_o]);
        }
        for c in decoder.iter_mut() {
            v.extend([&mut c.weight, &mut c.bias]);
        }
        v.extend([&mut head.weight, &mut head.bias]);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["image_conv", "image_patch", "exemplar_conv", "exemplar_patch"]
            .iter()
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .collect();
        for i in 0..self.fusion.len() {
            v.extend(["w_q", "w_k", "w_v", "w_o"].map(|w| format!("fusion.{i}.{w}")));
        }
        for i in 0..self.decoder.len() {
            v.extend([format!("decoder.{i}.weight"), format!("decoder.{i}.bias")]);
        }
        v.extend(["head.weight".to_string(), "head.bias".to_string()]);
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &CounterParams, alpha: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }
}

/// Token matrix `[rows, dim]` with its spatial layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tokens: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    /// `(h, w)` with `h * w == rows`.
    pub layout: (usize, usize),
}

impl FeatureMap {
    pub fn new(tokens: Vec<f64>, rows: usize, dim: usize, layout: (usize, usize)) -> Result<Self> {
        if tokens.len() != rows * dim || layout.0 * layout.1 != rows {
            return Err(Error::shape(
                (rows, dim, layout),
                format!("{} values", tokens.len()),
            ));
        }
        Ok(Self { tokens, rows, dim, layout })
    }

    pub fn empty(dim: usize) -> Self {
        Self { tokens: Vec::new(), rows: 0, dim, layout: (0, 0) }
    }

    fn from_chw(chw: &[f64], dims: Dims) -> Self {
        let m = dims.h * dims.w;
        let mut tokens = vec![0.0; chw.len()];
        for c in 0..dims.c {
            for i in 0..m {
                tokens[i * dims.c + c] = chw[c * m + i];
            }
        }
        Self { tokens, rows: m, dim: dims.c, layout: (dims.h, dims.w) }
    }

    fn to_chw(&self) -> (Vec<f64>, Dims) {
        (tokens_to_chw(&self.tokens, self.rows, self.dim), Dims::new(self.dim, self.layout.0, self.layout.1))
    }
}

fn tokens_to_chw(tokens: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let mut chw = vec![0.0; tokens.len()];
    for i in 0..rows {
        for c in 0..dim {
            chw[c * rows + i] = tokens[i * dim + c];
        }
    }
    chw
}

fn chw_to_tokens(chw: &[f64], dims: Dims) -> Vec<f64> {
    FeatureMap::from_chw(chw, dims).tokens
}

fn head_cols(mat: &[f64], rows: usize, dim: usize, head: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&mat[r * dim + head * dh..r * dim + (head + 1) * dh]);
    }
    out
}

fn add_head_cols(mat: &mut [f64], part: &[f64], rows: usize, dim: usize, head: usize, dh: usize) {
    for r in 0..rows {
        for (m, p) in mat[r * dim + head * dh..r * dim + (head + 1) * dh]
            .iter_mut()
            .zip(&part[r * dh..(r + 1) * dh])
        {
            *m += p;
        }
    }
}

fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

struct AttentionTrace {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// One `[M, N]` probability matrix per head.
    attn: Vec<Vec<f64>>,
    o: Vec<f64>,
}

fn attention_forward(
    x: &[f64],
    m: usize,
    e: &[f64],
    n: usize,
    p: &AttentionParams,
    heads: usize,
) -> (Vec<f64>, AttentionTrace) {
    let (d, de) = (p.dim(), p.exemplar_dim());
    let dh = d / heads;
    let q = matmul_nt(x, &p.w_q.data, m, d, d);
    let k = matmul_nt(e, &p.w_k.data, n, de, d);
    let v = matmul_nt(e, &p.w_v.data, n, de, d);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = vec![0.0; m * d];
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (head_cols(&q, m, d, h, dh), head_cols(&k, n, d, h, dh), head_cols(&v, n, d, h, dh));
        let mut s = matmul_nt(&qh, &kh, m, dh, n);
        s.iter_mut().for_each(|v| *v *= scale);
        softmax_rows(&mut s, n);
        add_head_cols(&mut o, &matmul_nn(&s, &vh, m, n, dh), m, d, h, dh);
        attn.push(s);
    }
    let mut y = matmul_nt(&o, &p.w_o.data, m, d, d);
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
    let trace = AttentionTrace { x: x.to_vec(), q, k, v, attn, o };
    (y, trace)
}

/// Returns `(dx, de)`.
fn attention_backward(
    t: &AttentionTrace,
    e: &[f64],
    m: usize,
    n: usize,
    p: &AttentionParams,
    heads: usize,
    dy: &[f64],
    g: &mut AttentionParams,
) -> (Vec<f64>, Vec<f64>) {
    let (d, de) = (p.dim(), p.exemplar_dim());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dx = dy.to_vec();
    add_into(&mut g.w_o.data, &matmul_tn(dy, &t.o, m, d, d));
    let d_o = matmul_nn(dy, &p.w_o.data, m, d, d);
    let mut dq = vec![0.0; m * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    for h in 0..heads {
        let a = &t.attn[h];
        let doh = head_cols(&d_o, m, d, h, dh);
        let (qh, kh, vh) = (head_cols(&t.q, m, d, h, dh), head_cols(&t.k, n, d, h, dh), head_cols(&t.v, n, d, h, dh));
        let da = matmul_nt(&doh, &vh, m, dh, n);
        add_head_cols(&mut dv, &matmul_tn(a, &doh, m, n, dh), n, d, h, dh);
        let mut ds = vec![0.0; m * n];
        for r in 0..m {
            let (ar, dar) = (&a[r * n..(r + 1) * n], &da[r * n..(r + 1) * n]);
            let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
            for j in 0..n {
                ds[r * n + j] = ar[j] * (dar[j] - dot) * scale;
            }
        }
        add_head_cols(&mut dq, &matmul_nn(&ds, &kh, m, n, dh), m, d, h, dh);
        add_head_cols(&mut dk, &matmul_tn(&ds, &qh, m, n, dh), n, d, h, dh);
    }
    add_into(&mut g.w_q.data, &matmul_tn(&dq, &t.x, m, d, d));
    add_into(&mut dx, &matmul_nn(&dq, &p.w_q.data, m, d, d));
    add_into(&mut g.w_k.data, &matmul_tn(&dk, e, n, d, de));
    add_into(&mut g.w_v.data, &matmul_tn(&dv, e, n, d, de));
    let mut de_out = matmul_nn(&dk, &p.w_k.data, n, d, de);
    add_into(&mut de_out, &matmul_nn(&dv, &p.w_v.data, n, d, de));
    (dx, de_out)
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Cross-attention of image tokens (queries) over exemplar tokens
/// (keys/values), with a residual connection. Zero exemplar tokens return
/// the query unchanged.
pub fn fuse(query: &FeatureMap, exemplars: &FeatureMap, block: &AttentionParams, heads: usize) -> Result<FeatureMap> {
    check_fuse_shapes(query, exemplars, block, heads)?;
    if exemplars.rows == 0 {
        return Ok(query.clone());
    }
    let (y, _) = attention_forward(&query.tokens, query.rows, &exemplars.tokens, exemplars.rows, block, heads);
    Ok(FeatureMap { tokens: y, ..query.clone() })
}

/// Per-head `[M, N]` attention probabilities used by [`fuse`].
pub fn attention_weights(
    query: &FeatureMap,
    exemplars: &FeatureMap,
    block: &AttentionParams,
    heads: usize,
) -> Result<Vec<Vec<f64>>> {
    check_fuse_shapes(query, exemplars, block, heads)?;
    if exemplars.rows == 0 {
        return Ok(Vec::new());
    }
    let (_, t) = attention_forward(&query.tokens, query.rows, &exemplars.tokens, exemplars.rows, block, heads);
    Ok(t.attn)
}

fn check_fuse_shapes(query: &FeatureMap, exemplars: &FeatureMap, block: &AttentionParams, heads: usize) -> Result<()> {
    if query.dim != block.dim() {
        return Err(Error::shape(format!("query [{}, {}]", query.rows, query.dim), format!("W_q {:?}", block.w_q.shape)));
    }
    if exemplars.dim != block.exemplar_dim() {
        return Err(Error::shape(
            format!("exemplars [{}, {}]", exemplars.rows, exemplars.dim),
            format!("W_k {:?}", block.w_k.shape),
        ));
    }
    if heads == 0 || block.dim() % heads != 0 {
        return Err(Error::Config(format!("{} heads do not divide dim {}", heads, block.dim())));
    }
    Ok(())
}

/// Image and exemplars converted to network input.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub image: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// One `[3, side, side]` buffer per exemplar.
    pub exemplars: Vec<Vec<f64>>,
}

fn normalized_chw(img: &RgbImage) -> Vec<f64> {
    imaging::to_chw(img).into_iter().map(|v| v - 0.5).collect()
}

struct ImageTrace {
    dims0: Dims,
    x: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    dims1: Dims,
}

struct ExemplarTrace {
    x: Vec<f64>,
    a: Vec<f64>,
    h: Vec<f64>,
    dims_a: Dims,
}

struct StageTrace {
    input_dims: Dims,
    up: Vec<f64>,
    up_dims: Dims,
    pre: Vec<f64>,
}

struct DecodeTrace {
    stages: Vec<StageTrace>,
    last: Vec<f64>,
    last_dims: Dims,
    z: Vec<f64>,
}

/// One conditioned forward pass, kept for the backward sweep.
struct StreamTrace {
    exemplars: Vec<ExemplarTrace>,
    e: Vec<f64>,
    n: usize,
    blocks: Vec<AttentionTrace>,
    decode: DecodeTrace,
    density: DensityMap,
}

/// Exemplar-conditioned density counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Counter {
    pub config: CounterConfig,
    pub params: CounterParams,
}

impl Counter {
    pub fn new(config: CounterConfig) -> Result<Self> {
        config.validate()?;
        let params = CounterParams::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: CounterConfig, params: CounterParams) -> Result<Self> {
        config.validate()?;
        let reference = CounterParams::init(&config);
        let shapes = |p: &CounterParams| p.tensors().iter().map(|t| t.shape.clone()).collect::<Vec<_>>();
        if shapes(&reference) != shapes(&params) {
            return Err(Error::shape(shapes(&params), shapes(&reference)));
        }
        Ok(Self { config, params })
    }

    pub fn prepare(&self, image: &RgbImage, exemplars: &[RgbImage]) -> Result<PreparedInput> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let p = self.config.patch;
        if w == 0 || h == 0 || w % p != 0 || h % p != 0 {
            return Err(Error::shape(format!("image {w}x{h}"), format!("multiples of patch {p}")));
        }
        let side = self.config.exemplar_side as u32;
        Ok(PreparedInput {
            image: normalized_chw(image),
            height: h,
            width: w,
            exemplars: exemplars
                .iter()
                .map(|e| normalized_chw(&imaging::resize(e, side, side)))
                .collect(),
        })
    }

    fn image_trace(&self, input: &PreparedInput) -> (FeatureMap, ImageTrace) {
        let p = &self.params;
        let dims0 = Dims::new(3, input.height, input.width);
        let (a1, dims1) = conv2d(&input.image, dims0, &p.image_conv, 1, 1);
        let h1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();
        let (t, tdims) = conv2d(&h1, dims1, &p.image_patch, self.config.patch, 0);
        let fm = FeatureMap::from_chw(&t, tdims);
        (fm, ImageTrace { dims0, x: input.image.clone(), a1, h1, dims1 })
    }

    pub fn encode_image(&self, input: &PreparedInput) -> FeatureMap {
        self.image_trace(input).0
    }

    fn exemplar_trace(&self, exemplars: &[Vec<f64>]) -> (FeatureMap, Vec<ExemplarTrace>) {
        let p = &self.params;
        let side = self.config.exemplar_side;
        let g = self.config.exemplar_grid;
        let de = self.config.exemplar_dim;
        let mut tokens = Vec::with_capacity(exemplars.len() * g * g * de);
        let mut traces = Vec::with_capacity(exemplars.len());
        for x in exemplars {
            let (a, dims_a) = conv2d(x, Dims::new(3, side, side), &p.exemplar_conv, 2, 1);
            let h: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let k = self.config.exemplar_kernel();
            let (t, tdims) = conv2d(&h, dims_a, &p.exemplar_patch, k, 0);
            tokens.extend(chw_to_tokens(&t, tdims));
            traces.push(ExemplarTrace { x: x.clone(), a, h, dims_a });
        }
        let rows = exemplars.len() * g * g;
        let fm = FeatureMap { tokens, rows, dim: de, layout: (exemplars.len() * g, g) };
        (fm, traces)
    }

    pub fn encode_exemplars(&self, exemplars: &[Vec<f64>]) -> FeatureMap {
        self.exemplar_trace(exemplars).0
    }

    fn decode_trace(&self, fused: &FeatureMap, skip: Option<&[f64]>) -> (DensityMap, DecodeTrace) {
        let p = &self.params;
        let (mut cur, mut dims) = fused.to_chw();
        let mut stages = Vec::with_capacity(p.decoder.len());
        for (i, conv) in p.decoder.iter().enumerate() {
            let (mut up, mut up_dims) = upsample2x(&cur, dims);
            if let (true, Some(extra)) = (i + 1 == p.decoder.len(), skip) {
                // Channel concatenation is buffer concatenation in CHW.
                up.extend_from_slice(extra);
                up_dims.c += extra.len() / (up_dims.h * up_dims.w);
            }
            let (pre, out_dims) = conv2d(&up, up_dims, conv, 1, 1);
            let next: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
            stages.push(StageTrace { input_dims: dims, up, up_dims, pre });
            cur = next;
            dims = out_dims;
        }
        let (z, zd) = conv2d(&cur, dims, &p.head, 1, 0);
        let grid = z.iter().map(|&v| softplus(v)).collect();
        let density = DensityMap::from_grid(zd.h, zd.w, self.config.density_scale, grid).expect("decoder output shape");
        (density, DecodeTrace { stages, last: cur, last_dims: dims, z })
    }

    /// Decode fused tokens; `skip` is the full-resolution encoder output
    /// and must be given exactly when the config enables it.
    pub fn decode(&self, fused: &FeatureMap, skip: Option<&[f64]>) -> Result<DensityMap> {
        self.check_skip(fused, skip)?;
        Ok(self.decode_trace(fused, skip).0)
    }

    fn check_skip(&self, fused: &FeatureMap, skip: Option<&[f64]>) -> Result<()> {
        let want = self.config.skip.then(|| {
            let side = self.config.patch;
            self.config.encoder_channels * fused.layout.0 * side * fused.layout.1 * side
        });
        if want != skip.map(<[f64]>::len) {
            return Err(Error::shape(skip.map(<[f64]>::len), want));
        }
        Ok(())
    }

    fn skip_of<'a>(&self, trace: &'a ImageTrace) -> Option<&'a [f64]> {
        self.config.skip.then_some(trace.h1.as_slice())
    }

    fn stream(&self, image_tokens: &FeatureMap, skip: Option<&[f64]>, exemplars: &[Vec<f64>]) -> Result<StreamTrace> {
        if exemplars.is_empty() && !self.config.allow_empty_exemplars {
            return Err(Error::Usage("counter called with zero exemplars and the bypass disabled".into()));
        }
        let (efm, exemplar_traces) = self.exemplar_trace(exemplars);
        let mut x = image_tokens.tokens.clone();
        let m = image_tokens.rows;
        let mut blocks = Vec::new();
        if efm.rows > 0 {
            for block in &self.params.fusion {
                let (y, t) = attention_forward(&x, m, &efm.tokens, efm.rows, block, self.config.heads);
                blocks.push(t);
                x = y;
            }
        }
        let fused = FeatureMap { tokens: x, ..image_tokens.clone() };
        let (density, decode) = self.decode_trace(&fused, skip);
        Ok(StreamTrace { exemplars: exemplar_traces, e: efm.tokens, n: efm.rows, blocks, decode, density })
    }

    /// Density map for prepared inputs.
    pub fn density(&self, input: &PreparedInput) -> Result<DensityMap> {
        let (tokens, trace) = self.image_trace(input);
        Ok(self.stream(&tokens, self.skip_of(&trace), &input.exemplars)?.density)
    }

    pub fn forward(&self, image: &RgbImage, exemplars: &[RgbImage]) -> Result<DensityMap> {
        self.density(&self.prepare(image, exemplars)?)
    }

    /// Loss of one image without gradients. `negatives: None` disables the
    /// contrastive term.
    pub fn loss(&self, input: &PreparedInput, negatives: Option<&[Vec<f64>]>, gt: &DensityMap) -> Result<LossReport> {
        let (tokens, trace) = self.image_trace(input);
        let skip = self.skip_of(&trace);
        let pos = self.stream(&tokens, skip, &input.exemplars)?;
        let neg = match negatives {
            Some(n) => Some(self.stream(&tokens, skip, n)?.density),
            None => None,
        };
        losses::total_loss(&pos.density, gt, neg.as_ref())
    }

    /// Loss of one image; parameter gradients are added into `grads`. The
    /// image encoding is shared by both streams.
    pub fn loss_and_grad(
        &self,
        input: &PreparedInput,
        negatives: Option<&[Vec<f64>]>,
        gt: &DensityMap,
        grads: &mut CounterParams,
    ) -> Result<LossReport> {
        let (tokens, image_trace) = self.image_trace(input);
        let skip = self.skip_of(&image_trace);
        let pos = self.stream(&tokens, skip, &input.exemplars)?;
        let neg = match negatives {
            Some(n) => Some(self.stream(&tokens, skip, n)?),
            None => None,
        };
        let lg = losses::total_loss_with_grad(&pos.density, gt, neg.as_ref().map(|s| &s.density))?;
        let (mut d_tokens, mut d_skip) = self.stream_backward(&pos, &lg.d_pos, tokens.rows, grads);
        if let (Some(neg), Some(d_neg)) = (neg.as_ref(), lg.d_neg.as_ref()) {
            let (dt, ds) = self.stream_backward(neg, d_neg, tokens.rows, grads);
            add_into(&mut d_tokens, &dt);
            add_into(&mut d_skip, &ds);
        }
        self.image_backward(&image_trace, &tokens, &d_tokens, &d_skip, grads);
        Ok(lg.report)
    }

    /// Backward through decoder, fusion and exemplar encoder; returns the
    /// gradients with respect to the image tokens and the skip features
    /// (empty without skip).
    fn stream_backward(
        &self,
        s: &StreamTrace,
        d_density: &[f64],
        m: usize,
        grads: &mut CounterParams,
    ) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let dt = &s.decode;
        let dz: Vec<f64> = d_density
            .iter()
            .zip(&dt.z)
            .map(|(g, &z)| g * losses::sigmoid(z))
            .collect();
        let mut d = conv2d_backward(&dt.last, dt.last_dims, &p.head, 1, 0, &dz, &mut grads.head, true)
            .expect("input gradient requested");
        let mut d_skip = Vec::new();
        for (i, st) in dt.stages.iter().enumerate().rev() {
            let da: Vec<f64> = d.iter().zip(&st.pre).map(|(g, &a)| g * silu_grad(a)).collect();
            let mut d_up = conv2d_backward(&st.up, st.up_dims, &p.decoder[i], 1, 1, &da, &mut grads.decoder[i], true)
                .expect("input gradient requested");
            let own = st.input_dims.c * st.up_dims.h * st.up_dims.w;
            if d_up.len() > own {
                d_skip = d_up.split_off(own);
            }
            d = upsample2x_backward(&d_up, st.input_dims);
        }
        let first = dt.stages.first().map(|s| s.input_dims).unwrap_or(dt.last_dims);
        let mut dx = chw_to_tokens(&d, first);
        let mut de = vec![0.0; s.e.len()];
        for (b, t) in s.blocks.iter().enumerate().rev() {
            let (dxi, dei) =
                attention_backward(t, &s.e, m, s.n, &p.fusion[b], self.config.heads, &dx, &mut grads.fusion[b]);
            dx = dxi;
            add_into(&mut de, &dei);
        }
        if s.n > 0 {
            self.exemplar_backward(&s.exemplars, &de, grads);
        }
        (dx, d_skip)
    }

    fn exemplar_backward(&self, traces: &[ExemplarTrace], de: &[f64], grads: &mut CounterParams) {
        let p = &self.params;
        let g = self.config.exemplar_grid;
        let dim = self.config.exemplar_dim;
        let k = self.config.exemplar_kernel();
        let per = g * g * dim;
        let side = self.config.exemplar_side;
        for (i, t) in traces.iter().enumerate() {
            let dt = tokens_to_chw(&de[i * per..(i + 1) * per], g * g, dim);
            let dh = conv2d_backward(&t.h, t.dims_a, &p.exemplar_patch, k, 0, &dt, &mut grads.exemplar_patch, true)
                .expect("input gradient requested");
            let da: Vec<f64> = dh.iter().zip(&t.a).map(|(g, &a)| g * silu_grad(a)).collect();
            conv2d_backward(&t.x, Dims::new(3, side, side), &p.exemplar_conv, 2, 1, &da, &mut grads.exemplar_conv, false);
        }
    }

    fn image_backward(
        &self,
        t: &ImageTrace,
        tokens: &FeatureMap,
        d_tokens: &[f64],
        d_skip: &[f64],
        grads: &mut CounterParams,
    ) {
        let p = &self.params;
        let dt = tokens_to_chw(d_tokens, tokens.rows, tokens.dim);
        let mut dh = conv2d_backward(&t.h1, t.dims1, &p.image_patch, self.config.patch, 0, &dt, &mut grads.image_patch, true)
            .expect("input gradient requested");
        if !d_skip.is_empty() {
            add_into(&mut dh, d_skip);
        }
        let da: Vec<f64> = dh.iter().zip(&t.a1).map(|(g, &a)| g * silu_grad(a)).collect();
        conv2d_backward(&t.x, t.dims0, &p.image_conv, 1, 1, &da, &mut grads.image_conv, false);
    }
}

/// Predicted count: grid sum divided by the density scale.
pub fn count_from_density(density: &DensityMap) -> f64 {
    density.count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_map(rows: usize, dim: usize, seed: u64) -> FeatureMap {
        let mut r = rng::stream(seed, &[]);
        let tokens = (0..rows * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        FeatureMap::new(tokens, rows, dim, (rows, 1)).unwrap()
    }

    fn block(dim: usize, de: usize) -> AttentionParams {
        AttentionParams::init(dim, de, &mut rng::stream(5, &[]))
    }

    #[test]
    fn fuse_shape_and_bypass() {
        let q = random_map(16, 8, 1);
        let e = random_map(12, 8, 2);
        let b = block(8, 8);
        let f = fuse(&q, &e, &b, 2).unwrap();
        assert_eq!((f.rows, f.dim, f.layout), (16, 8, q.layout));
        assert_eq!(fuse(&q, &FeatureMap::empty(8), &b, 2).unwrap(), q);
        assert!(matches!(fuse(&q, &random_map(3, 5, 2), &b, 2), Err(Error::Shape { .. })));
        assert!(matches!(fuse(&random_map(3, 6, 2), &e, &b, 2), Err(Error::Shape { .. })));
        for head in attention_weights(&q, &e, &b, 2).unwrap() {
            for row in head.chunks(12) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_key_gets_all_attention() {
        let q = random_map(5, 8, 1);
        let e = random_map(1, 6, 3);
        for head in attention_weights(&q, &e, &block(8, 6), 1).unwrap() {
            assert!(head.iter().all(|&a| a == 1.0));
        }
    }

    #[test]
    fn duplicate_and_permuted_keys_do_not_change_the_output() {
        let q = random_map(7, 8, 1);
        let e = random_map(3, 6, 4);
        let b = block(8, 6);
        let one = FeatureMap::new(e.tokens[..6].to_vec(), 1, 6, (1, 1)).unwrap();
        let mut twice = e.tokens[..6].to_vec();
        twice.extend_from_slice(&e.tokens[..6]);
        let two = FeatureMap::new(twice, 2, 6, (2, 1)).unwrap();
        let (a, c) = (fuse(&q, &one, &b, 2).unwrap(), fuse(&q, &two, &b, 2).unwrap());
        assert!(a.tokens.iter().zip(&c.tokens).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut perm = e.tokens[12..18].to_vec();
        perm.extend_from_slice(&e.tokens[..12]);
        let p = FeatureMap::new(perm, 3, 6, (3, 1)).unwrap();
        let (a, c) = (fuse(&q, &e, &b, 2).unwrap(), fuse(&q, &p, &b, 2).unwrap());
        assert!(a.tokens.iter().zip(&c.tokens).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    fn scene_image(side: u32, seed: u64) -> RgbImage {
        let mut r = rng::stream(seed, &[]);
        RgbImage::from_fn(side, side, |_, _| image::Rgb([r.random(), r.random(), r.random()]))
    }

    #[test]
    fn forward_contract() {
        let c = Counter::new(CounterConfig::tiny()).unwrap();
        let img = scene_image(32, 1);
        let ex = vec![scene_image(9, 2), scene_image(12, 3)];
        let d = c.forward(&img, &ex).unwrap();
        assert_eq!(d.shape(), (32, 32));
        assert!(d.grid().iter().all(|&v| v >= 0.0));
        assert_eq!(d, c.forward(&img, &ex).unwrap());
        assert!(c.forward(&scene_image(24, 1), &ex).is_err());

        let strict = Counter::new(CounterConfig { allow_empty_exemplars: false, ..CounterConfig::tiny() }).unwrap();
        assert!(matches!(strict.forward(&img, &[]), Err(Error::Usage(_))));
        assert_eq!(c.forward(&img, &[]).unwrap().shape(), (32, 32));
    }

    #[test]
    fn default_config_is_valid_and_sized() {
        let c = Counter::new(CounterConfig::default()).unwrap();
        assert_eq!(c.params.names().len(), c.params.tensors().len());
        let d = c.forward(&scene_image(64, 1), &[scene_image(10, 2)]).unwrap();
        assert_eq!(d.shape(), (64, 64));
        assert!(CounterConfig { patch: 8, ..CounterConfig::default() }.validate().is_err());
    }

    #[test]
    fn skip_features_reach_the_decoder() {
        let plain = Counter::new(CounterConfig::tiny()).unwrap();
        let skip = Counter::new(CounterConfig { skip: true, ..CounterConfig::tiny() }).unwrap();
        let last = |c: &Counter| c.params.decoder.last().unwrap().c_in();
        assert_eq!(last(&skip), last(&plain) + CounterConfig::tiny().encoder_channels);
        let d = skip.forward(&scene_image(32, 1), &[scene_image(10, 2)]).unwrap();
        assert_eq!(d.shape(), (32, 32));
        let fused = FeatureMap::new(vec![0.1; 4 * 8], 4, 8, (2, 2)).unwrap();
        assert!(skip.decode(&fused, None).is_err());
        assert!(plain.decode(&fused, Some(&[0.0; 3])).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        gradient_check(CounterConfig::tiny(), 1e-7);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences_with_skip() {
        // The skip path shrinks the deep-layer gradients to ~1e-7, where
        // central differences carry ~1e-11 of rounding noise.
        gradient_check(CounterConfig { skip: true, ..CounterConfig::tiny() }, 1e-6);
    }

    fn gradient_check(config: CounterConfig, floor: f64) {
        let mut counter = Counter::new(config).unwrap();
        let input = counter.prepare(&scene_image(32, 7), &[scene_image(10, 8), scene_image(7, 9)]).unwrap();
        let neg: Vec<Vec<f64>> = counter.prepare(&scene_image(16, 1), &[scene_image(8, 10)]).unwrap().exemplars;
        let gt = crate::density::generate_density_map(&[(5.0, 6.0), (20.0, 25.0)], 32, 32, 4.0, 1.0).unwrap();
        let mut grads = counter.params.zeros_like();
        counter.loss_and_grad(&input, Some(&neg), &gt, &mut grads).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data.clone()).collect();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut r = rng::stream(3, &[]);
        let total = counter.params.num_scalars();
        for _ in 0..300 {
            let idx = r.random_range(0..total);
            let (mut t, mut off) = (0, idx);
            while off >= counter.params.tensors()[t].len() {
                off -= counter.params.tensors()[t].len();
                t += 1;
            }
            let orig = counter.params.tensors()[t].data[off];
            counter.params.tensors_mut()[t].data[off] = orig + h;
            let up = counter.loss(&input, Some(&neg), &gt).unwrap().l_total;
            counter.params.tensors_mut()[t].data[off] = orig - h;
            let down = counter.loss(&input, Some(&neg), &gt).unwrap().l_total;
            counter.params.tensors_mut()[t].data[off] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
