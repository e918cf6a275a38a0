//! Synthetic encoder–decoder vision operators with controllable per-view
//! inconsistency. Each operator maps an image (and, for labeling operators,
//! its ground-truth label map) to a dense per-pixel feature map at full
//! resolution, and decodes feature maps back to its output space (RGB or
//! labels). Encoding is deterministic given (view, view_seed); the seed
//! drives the per-view corruption that the lifting pipeline must cancel.
//!
//! Operators:
//! - `colorquant` (D'=32, training): soft palette quantization lifted by a
//!   fixed full-rank embedding; corrupted by per-view palette hue rotation
//!   plus additive feature noise.
//! - `gradfeat` (D'=32, training): 16 local gradient channels plus a 16-dim
//!   palette-quantization block; corrupted by additive noise only.
//! - `labelpaint` (D'=24, held-out): one-hot ground-truth labels lifted by a
//!   fixed matrix; corrupted by label flips near label boundaries.
//! - `stylelite` (D'=40, held-out): palette quantization with 8 redundant
//!   channels and a fixed tone curve in decode; corrupted by per-view
//!   channel-affine tone jitter. Truncating its features to 32 channels is
//!   decode-preserving by construction.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensorio::{Rng, Tensor};

/// Maximum number of distinct scene labels (0 = background).
pub const MAX_LABELS: usize = 8;

/// Feature dimension the lifting model operates at.
pub const MODEL_FEAT_DIM: usize = 32;

const SALT_HUE: u64 = 1;
const SALT_NOISE: u64 = 2;
const SALT_FLIP: u64 = 3;
const SALT_TONE: u64 = 4;

/// Fixed 8-color palette shared by the quantization-based operators.
pub const PALETTE: [[f64; 3]; MAX_LABELS] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.20, 0.90],
    [0.85, 0.80, 0.10],
    [0.80, 0.15, 0.80],
    [0.10, 0.80, 0.85],
    [0.95, 0.55, 0.10],
    [0.35, 0.20, 0.60],
];

/// One rendered view handed to an operator's encoder.
pub struct ViewInput<'a> {
    /// [H, W, 3] RGB in [0, 1].
    pub rgb: &'a Tensor<f32>,
    /// Row-major H·W per-pixel label ids (0 = background).
    pub labels: &'a [u8],
}

impl<'a> ViewInput<'a> {
    pub fn new(rgb: &'a Tensor<f32>, labels: &'a [u8]) -> Self {
        assert_eq!(rgb.rank(), 3, "rgb must be [H,W,3]");
        assert_eq!(rgb.dim(2), 3, "rgb must be [H,W,3]");
        assert_eq!(labels.len(), rgb.dim(0) * rgb.dim(1), "label count");
        ViewInput { rgb, labels }
    }
    fn h(&self) -> usize {
        self.rgb.dim(0)
    }
    fn w(&self) -> usize {
        self.rgb.dim(1)
    }
}

/// Decoded operator output: a float map in the operator's output space
/// (RGB [H,W,3] or one-hot labels [H,W,MAX_LABELS]) plus hard labels when
/// the output space is categorical.
pub struct DecodedOutput {
    pub map: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InconsistencyKind {
    HueJitter,
    AdditiveNoise,
    BoundaryFlip,
}

pub trait VisionOperator: Send + Sync {
    fn operator_id(&self) -> &'static str;
    /// Native feature dimension D'.
    fn feat_dim(&self) -> usize;
    fn noise_sigma(&self) -> f64;
    fn inconsistency_kind(&self) -> InconsistencyKind;
    /// Deterministic per-view corrupted encoding, [H, W, D'].
    fn encode(&self, view: &ViewInput, view_seed: u64) -> Tensor<f32>;
    /// Corruption-free encoding — the view-consistent limit.
    fn encode_clean(&self, view: &ViewInput) -> Tensor<f32>;
    /// Decode a feature map (native D', or for truncation-tolerant
    /// operators the model dimension) back to the output space.
    fn decode(&self, feat: &Tensor<f32>) -> DecodedOutput;
}

/// Pad with zero channels, truncate, or pass through so that `feat`'s last
/// dimension becomes `target`.
pub fn adapt_dim(feat: &Tensor<f32>, target: usize) -> Tensor<f32> {
    let rank = feat.rank();
    assert!(rank >= 2, "adapt_dim needs a channel axis");
    let d = feat.dim(rank - 1);
    if d == target {
        return feat.clone();
    }
    let rows = feat.len() / d;
    let mut dims = feat.dims().to_vec();
    dims[rank - 1] = target;
    let mut out = vec![0.0f32; rows * target];
    let keep = d.min(target);
    for r in 0..rows {
        out[r * target..r * target + keep]
            .copy_from_slice(&feat.data()[r * d..r * d + keep]);
    }
    Tensor::from_vec(&dims, out)
}

pub const TRAIN_OPERATOR_IDS: [&str; 2] = ["colorquant", "gradfeat"];
pub const HELD_OUT_OPERATOR_IDS: [&str; 2] = ["labelpaint", "stylelite"];

/// Build an operator by id with its default corruption settings.
pub fn make_operator(id: &str, seed: u64) -> Result<Box<dyn VisionOperator>> {
    match id {
        "colorquant" => Ok(Box::new(ColorQuant::new(seed))),
        "gradfeat" => Ok(Box::new(GradFeat::new(seed))),
        "labelpaint" => Ok(Box::new(LabelPaint::new(seed))),
        "stylelite" => Ok(Box::new(StyleLite::new(seed))),
        other => Err(Error::UnknownOperator(other.to_string())),
    }
}

/// Build an operator by id with its additive feature-noise level overridden;
/// every other corruption setting keeps its default. Only operators with an
/// additive-noise channel qualify.
pub fn make_operator_with_sigma(
    id: &str,
    seed: u64,
    sigma: f64,
) -> Result<Box<dyn VisionOperator>> {
    match id {
        "colorquant" => Ok(Box::new(ColorQuant::with_options(seed, 0.1, sigma, 0.3))),
        "gradfeat" => Ok(Box::new(GradFeat::with_options(seed, sigma))),
        "stylelite" => Ok(Box::new(StyleLite::with_options(seed, 0.25, sigma))),
        other => Err(Error::UnknownOperator(format!(
            "{other} has no additive-noise control"
        ))),
    }
}

// ---------------------------------------------------------------------------
// shared numeric pieces

/// Rotation of RGB space about the gray axis (1,1,1)/√3 by `theta` radians —
/// a hue rotation that leaves luminance along the axis unchanged.
fn hue_rotation(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let u = 1.0 / 3f64.sqrt();
    let (ux, uy, uz) = (u, u, u);
    let cc = 1.0 - c;
    [
        [
            c + ux * ux * cc,
            ux * uy * cc - uz * s,
            ux * uz * cc + uy * s,
        ],
        [
            uy * ux * cc + uz * s,
            c + uy * uy * cc,
            uy * uz * cc - ux * s,
        ],
        [
            uz * ux * cc - uy * s,
            uz * uy * cc + ux * s,
            c + uz * uz * cc,
        ],
    ]
}

fn rotate_palette(theta: f64) -> [[f64; 3]; MAX_LABELS] {
    let m = hue_rotation(theta);
    let mut out = PALETTE;
    for color in &mut out {
        let p = *color;
        for (r, row) in m.iter().enumerate() {
            color[r] = (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Per-pixel softmax over negative squared distances to the palette.
/// Returns [H·W, 8] simplex rows.
fn soft_assign(rgb: &Tensor<f32>, palette: &[[f64; 3]; MAX_LABELS], temp: f64) -> Vec<[f64; MAX_LABELS]> {
    let n = rgb.dim(0) * rgb.dim(1);
    let px = rgb.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (r, g, b) = (
            px[3 * i] as f64,
            px[3 * i + 1] as f64,
            px[3 * i + 2] as f64,
        );
        let mut scores = [0.0f64; MAX_LABELS];
        let mut best = f64::NEG_INFINITY;
        for (k, c) in palette.iter().enumerate() {
            let d = (r - c[0]).powi(2) + (g - c[1]).powi(2) + (b - c[2]).powi(2);
            scores[k] = -d / temp;
            best = best.max(scores[k]);
        }
        let mut sum = 0.0;
        for s in &mut scores {
            *s = (*s - best).exp();
            sum += *s;
        }
        for s in &mut scores {
            *s /= sum;
        }
        out.push(scores);
    }
    out
}

/// Moore–Penrose pseudo-inverse of a full-row-rank k×d matrix (k ≤ d),
/// with its condition number.
fn pinv_and_condition(mat: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let svd = mat.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    assert!(smin > 1e-12, "embedding matrix is rank-deficient");
    let pinv = svd.pseudo_inverse(1e-12).expect("pseudo-inverse");
    (pinv, smax / smin)
}

fn seeded_embedding(seed: u64, salt: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut rng = Rng::new(seed, 0).derive(salt);
    let std = 1.0 / (cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.normal() * std)
}

/// weights [n, 8] on the simplex × embedding rows → features [n, d].
fn lift_weights(weights: &[[f64; MAX_LABELS]], embed: &DMatrix<f64>) -> Vec<f64> {
    let d = embed.ncols();
    let mut out = vec![0.0f64; weights.len() * d];
    for (i, w) in weights.iter().enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        for (k, &wk) in w.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            for (c, slot) in row.iter_mut().enumerate() {
                *slot += wk * embed[(k, c)];
            }
        }
    }
    out
}

fn add_noise(feat: &mut [f64], sigma: f64, rng: &mut Rng) {
    if sigma == 0.0 {
        return;
    }
    for f in feat {
        *f += sigma * rng.normal();
    }
}

fn to_f32_tensor(h: usize, w: usize, d: usize, data: Vec<f64>) -> Tensor<f32> {
    Tensor::from_vec(&[h, w, d], data.into_iter().map(|x| x as f32).collect())
}

/// feature rows [n, d] × pinv (d×8) → clamped, renormalized simplex rows.
fn features_to_simplex(
    feat: &Tensor<f32>,
    d: usize,
    read_d: usize,
    pinv: &DMatrix<f64>,
) -> Vec<[f64; MAX_LABELS]> {
    let n = feat.len() / d;
    let data = feat.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &data[i * d..i * d + read_d];
        let mut a = [0.0f64; MAX_LABELS];
        for k in 0..MAX_LABELS {
            let mut acc = 0.0;
            for (c, &f) in row.iter().enumerate() {
                acc += f as f64 * pinv[(c, k)];
            }
            a[k] = acc.max(0.0);
        }
        let sum: f64 = a.iter().sum();
        if sum <= 1e-12 {
            a = [1.0 / MAX_LABELS as f64; MAX_LABELS];
        } else {
            for x in &mut a {
                *x /= sum;
            }
        }
        out.push(a);
    }
    out
}

fn blend_palette(weights: &[[f64; MAX_LABELS]]) -> Vec<f64> {
    let mut out = vec![0.0f64; weights.len() * 3];
    for (i, w) in weights.iter().enumerate() {
        for (k, &wk) in w.iter().enumerate() {
            out[3 * i] += wk * PALETTE[k][0];
            out[3 * i + 1] += wk * PALETTE[k][1];
            out[3 * i + 2] += wk * PALETTE[k][2];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// colorquant

pub struct ColorQuant {
    seed: u64,
    temperature: f64,
    noise_sigma: f64,
    /// Maximum palette hue-rotation magnitude in radians.
    hue_jitter: f64,
    embed: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl ColorQuant {
    pub const FEAT_DIM: usize = 32;

    pub fn new(seed: u64) -> Self {
        Self::with_options(seed, 0.1, 0.05, 0.3)
    }

    pub fn with_options(seed: u64, temperature: f64, noise_sigma: f64, hue_jitter: f64) -> Self {
        assert!(temperature > 0.0);
        assert!(noise_sigma >= 0.0 && hue_jitter >= 0.0);
        let embed = seeded_embedding(seed, 11, MAX_LABELS, Self::FEAT_DIM);
        let (pinv, kappa) = pinv_and_condition(&embed);
        assert!(kappa < 50.0, "embedding condition {kappa} too high");
        ColorQuant {
            seed,
            temperature,
            noise_sigma,
            hue_jitter,
            embed,
            pinv,
        }
    }

    fn encode_with(&self, view: &ViewInput, theta: f64, noise_rng: Option<&mut Rng>) -> Tensor<f32> {
        let palette = if theta == 0.0 {
            PALETTE
        } else {
            rotate_palette(theta)
        };
        let weights = soft_assign(view.rgb, &palette, self.temperature);
        let mut feat = lift_weights(&weights, &self.embed);
        if let Some(rng) = noise_rng {
            add_noise(&mut feat, self.noise_sigma, rng);
        }
        to_f32_tensor(view.h(), view.w(), Self::FEAT_DIM, feat)
    }
}

impl VisionOperator for ColorQuant {
    fn operator_id(&self) -> &'static str {
        "colorquant"
    }
    fn feat_dim(&self) -> usize {
        Self::FEAT_DIM
    }
    fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
    fn inconsistency_kind(&self) -> InconsistencyKind {
        InconsistencyKind::HueJitter
    }

    fn encode(&self, view: &ViewInput, view_seed: u64) -> Tensor<f32> {
        let theta = if self.hue_jitter > 0.0 {
            Rng::new(self.seed, view_seed)
                .derive(SALT_HUE)
                .uniform_in(-self.hue_jitter, self.hue_jitter)
        } else {
            0.0
        };
        let mut noise = Rng::new(self.seed, view_seed).derive(SALT_NOISE);
        self.encode_with(view, theta, Some(&mut noise))
    }

    fn encode_clean(&self, view: &ViewInput) -> Tensor<f32> {
        self.encode_with(view, 0.0, None)
    }

    fn decode(&self, feat: &Tensor<f32>) -> DecodedOutput {
        let d = feat.dim(feat.rank() - 1);
        assert_eq!(d, Self::FEAT_DIM, "colorquant decodes 32-dim features");
        let weights = features_to_simplex(feat, d, d, &self.pinv);
        let rgb = blend_palette(&weights);
        DecodedOutput {
            map: to_f32_tensor(feat.dim(0), feat.dim(1), 3, rgb),
            labels: None,
        }
    }
}

// ---------------------------------------------------------------------------
// gradfeat

/// Gain applied to raw central-difference gradients so their magnitude is
/// comparable to the quantization channels.
const GRAD_GAIN: f64 = 2.0;

pub struct GradFeat {
    seed: u64,
    noise_sigma: f64,
    temperature: f64,
    /// 8→16 embedding for the quantization block (channels 16..32).
    embed16: DMatrix<f64>,
    pinv16: DMatrix<f64>,
}

impl GradFeat {
    pub const FEAT_DIM: usize = 32;

    pub fn new(seed: u64) -> Self {
        Self::with_options(seed, 0.05)
    }

    pub fn with_options(seed: u64, noise_sigma: f64) -> Self {
        let embed16 = seeded_embedding(seed, 13, MAX_LABELS, 16);
        let (pinv16, kappa) = pinv_and_condition(&embed16);
        assert!(kappa < 50.0, "embedding condition {kappa} too high");
        GradFeat {
            seed,
            noise_sigma,
            temperature: 0.1,
            embed16,
            pinv16,
        }
    }

    /// Channels 0..16: central-difference gradients of luminance and R/G/B
    /// at pixel steps 1 and 2 (border-clamped), scaled by GRAD_GAIN.
    fn gradient_block(view: &ViewInput) -> Vec<f64> {
        let (h, w) = (view.h(), view.w());
        let px = view.rgb.data();
        let chan = |x: usize, y: usize, c: usize| px[3 * (y * w + x) + c] as f64;
        let lum = |x: usize, y: usize| {
            0.299 * chan(x, y, 0) + 0.587 * chan(x, y, 1) + 0.114 * chan(x, y, 2)
        };
        let mut out = vec![0.0f64; h * w * 16];
        for y in 0..h {
            for x in 0..w {
                let row = &mut out[16 * (y * w + x)..16 * (y * w + x) + 16];
                let mut slot = 0;
                for step in [1usize, 2] {
                    let xm = x.saturating_sub(step);
                    let xp = (x + step).min(w - 1);
                    let ym = y.saturating_sub(step);
                    let yp = (y + step).min(h - 1);
                    let span_x = (xp - xm).max(1) as f64;
                    let span_y = (yp - ym).max(1) as f64;
                    for source in 0..4usize {
                        let v = |x: usize, y: usize| {
                            if source == 0 {
                                lum(x, y)
                            } else {
                                chan(x, y, source - 1)
                            }
                        };
                        row[slot] = GRAD_GAIN * (v(xp, y) - v(xm, y)) / span_x;
                        row[slot + 1] = GRAD_GAIN * (v(x, yp) - v(x, ym)) / span_y;
                        slot += 2;
                    }
                }
            }
        }
        out
    }

    fn encode_inner(&self, view: &ViewInput, noise_rng: Option<&mut Rng>) -> Tensor<f32> {
        let grads = Self::gradient_block(view);
        let weights = soft_assign(view.rgb, &PALETTE, self.temperature);
        let quant = lift_weights(&weights, &self.embed16);
        let n = view.h() * view.w();
        let mut feat = vec![0.0f64; n * Self::FEAT_DIM];
        for i in 0..n {
            feat[i * 32..i * 32 + 16].copy_from_slice(&grads[i * 16..(i + 1) * 16]);
            feat[i * 32 + 16..i * 32 + 32].copy_from_slice(&quant[i * 16..(i + 1) * 16]);
        }
        if let Some(rng) = noise_rng {
            add_noise(&mut feat, self.noise_sigma, rng);
        }
        to_f32_tensor(view.h(), view.w(), Self::FEAT_DIM, feat)
    }
}

impl VisionOperator for GradFeat {
    fn operator_id(&self) -> &'static str {
        "gradfeat"
    }
    fn feat_dim(&self) -> usize {
        Self::FEAT_DIM
    }
    fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
    fn inconsistency_kind(&self) -> InconsistencyKind {
        InconsistencyKind::AdditiveNoise
    }

    fn encode(&self, view: &ViewInput, view_seed: u64) -> Tensor<f32> {
        let mut noise = Rng::new(self.seed, view_seed).derive(SALT_NOISE);
        self.encode_inner(view, Some(&mut noise))
    }

    fn encode_clean(&self, view: &ViewInput) -> Tensor<f32> {
        self.encode_inner(view, None)
    }

    /// Reconstruction reads only the quantization block (channels 16..32).
    fn decode(&self, feat: &Tensor<f32>) -> DecodedOutput {
        let d = feat.dim(feat.rank() - 1);
        assert_eq!(d, Self::FEAT_DIM, "gradfeat decodes 32-dim features");
        let n = feat.len() / d;
        let mut quant = vec![0.0f32; n * 16];
        for i in 0..n {
            quant[i * 16..(i + 1) * 16]
                .copy_from_slice(&feat.data()[i * d + 16..i * d + 32]);
        }
        let quant = Tensor::from_vec(&[feat.dim(0), feat.dim(1), 16], quant);
        let weights = features_to_simplex(&quant, 16, 16, &self.pinv16);
        let rgb = blend_palette(&weights);
        DecodedOutput {
            map: to_f32_tensor(feat.dim(0), feat.dim(1), 3, rgb),
            labels: None,
        }
    }
}

// ---------------------------------------------------------------------------
// labelpaint

pub struct LabelPaint {
    seed: u64,
    /// Per-view boundary flip probability range.
    flip_lo: f64,
    flip_hi: f64,
    /// 8→24 lifting matrix; decode classifies to the nearest row.
    lift: DMatrix<f64>,
}

impl LabelPaint {
    pub const FEAT_DIM: usize = 24;

    pub fn new(seed: u64) -> Self {
        Self::with_options(seed, 0.05, 0.2)
    }

    pub fn with_options(seed: u64, flip_lo: f64, flip_hi: f64) -> Self {
        assert!((0.0..=1.0).contains(&flip_lo) && flip_lo <= flip_hi && flip_hi <= 1.0);
        let lift = seeded_embedding(seed, 17, MAX_LABELS, Self::FEAT_DIM);
        let (_, kappa) = pinv_and_condition(&lift);
        assert!(kappa < 50.0, "lifting matrix condition {kappa} too high");
        LabelPaint {
            seed,
            flip_lo,
            flip_hi,
            lift,
        }
    }

    /// Pixels with a differently-labeled pixel within Chebyshev distance 2.
    fn boundary_mask(labels: &[u8], h: usize, w: usize) -> Vec<bool> {
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let own = labels[y * w + x];
                'scan: for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        if labels[ny as usize * w + nx as usize] != own {
                            mask[y * w + x] = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        mask
    }

    /// The per-view corrupted label map: each boundary-adjacent pixel flips
    /// with probability p(view_seed) to the label of a differing neighbor.
    pub fn corrupted_labels(&self, view: &ViewInput, view_seed: u64) -> Vec<u8> {
        let (h, w) = (view.h(), view.w());
        let mut rng = Rng::new(self.seed, view_seed).derive(SALT_FLIP);
        let p = rng.uniform_in(self.flip_lo, self.flip_hi);
        let mask = Self::boundary_mask(view.labels, h, w);
        let mut out = view.labels.to_vec();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !mask[i] || rng.uniform() >= p {
                    continue;
                }
                let own = view.labels[i];
                let mut candidates: Vec<u8> = Vec::new();
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let l = view.labels[ny as usize * w + nx as usize];
                        if l != own && !candidates.contains(&l) {
                            candidates.push(l);
                        }
                    }
                }
                out[i] = candidates[rng.below(candidates.len())];
            }
        }
        out
    }

    fn lift_labels(&self, labels: &[u8], h: usize, w: usize) -> Tensor<f32> {
        let d = Self::FEAT_DIM;
        let mut feat = vec![0.0f64; h * w * d];
        for (i, &l) in labels.iter().enumerate() {
            let k = l as usize;
            assert!(k < MAX_LABELS, "label {k} out of range");
            for c in 0..d {
                feat[i * d + c] = self.lift[(k, c)];
            }
        }
        to_f32_tensor(h, w, d, feat)
    }
}

impl VisionOperator for LabelPaint {
    fn operator_id(&self) -> &'static str {
        "labelpaint"
    }
    fn feat_dim(&self) -> usize {
        Self::FEAT_DIM
    }
    fn noise_sigma(&self) -> f64 {
        0.0
    }
    fn inconsistency_kind(&self) -> InconsistencyKind {
        InconsistencyKind::BoundaryFlip
    }

    fn encode(&self, view: &ViewInput, view_seed: u64) -> Tensor<f32> {
        let labels = self.corrupted_labels(view, view_seed);
        self.lift_labels(&labels, view.h(), view.w())
    }

    fn encode_clean(&self, view: &ViewInput) -> Tensor<f32> {
        self.lift_labels(view.labels, view.h(), view.w())
    }

    fn decode(&self, feat: &Tensor<f32>) -> DecodedOutput {
        let d = feat.dim(feat.rank() - 1);
        assert_eq!(d, Self::FEAT_DIM, "labelpaint decodes 24-dim features");
        let n = feat.len() / d;
        let mut labels = Vec::with_capacity(n);
        let mut onehot = vec![0.0f32; n * MAX_LABELS];
        for i in 0..n {
            let row = &feat.data()[i * d..(i + 1) * d];
            let mut best = (0usize, f64::INFINITY);
            for k in 0..MAX_LABELS {
                let mut dist = 0.0;
                for (c, &f) in row.iter().enumerate() {
                    let diff = f as f64 - self.lift[(k, c)];
                    dist += diff * diff;
                }
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            labels.push(best.0 as u8);
            onehot[i * MAX_LABELS + best.0] = 1.0;
        }
        DecodedOutput {
            map: Tensor::from_vec(&[feat.dim(0), feat.dim(1), MAX_LABELS], onehot),
            labels: Some(labels),
        }
    }
}

// ---------------------------------------------------------------------------
// stylelite

/// Fixed per-channel gamma applied to decoded RGB — the deterministic part
/// of the stylization.
const TONE_GAMMA: [f64; 3] = [0.8, 1.0, 1.25];

pub struct StyleLite {
    seed: u64,
    temperature: f64,
    /// Per-view channel-affine jitter magnitude.
    tone_jitter: f64,
    noise_sigma: f64,
    embed: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl StyleLite {
    pub const FEAT_DIM: usize = 40;

    pub fn new(seed: u64) -> Self {
        Self::with_options(seed, 0.25, 0.0)
    }

    pub fn with_options(seed: u64, tone_jitter: f64, noise_sigma: f64) -> Self {
        let embed = seeded_embedding(seed, 19, MAX_LABELS, 32);
        let (pinv, kappa) = pinv_and_condition(&embed);
        assert!(kappa < 50.0, "embedding condition {kappa} too high");
        StyleLite {
            seed,
            temperature: 0.1,
            tone_jitter,
            noise_sigma,
            embed,
            pinv,
        }
    }

    fn encode_inner(&self, view: &ViewInput, jitter: Option<u64>) -> Tensor<f32> {
        let weights = soft_assign(view.rgb, &PALETTE, self.temperature);
        let mut base = lift_weights(&weights, &self.embed);
        if let Some(view_seed) = jitter {
            let mut tone = Rng::new(self.seed, view_seed).derive(SALT_TONE);
            let j = self.tone_jitter;
            let mut scale = [0.0f64; 32];
            let mut offset = [0.0f64; 32];
            for c in 0..32 {
                scale[c] = 1.0 + tone.uniform_in(-j, j);
                offset[c] = tone.uniform_in(-0.1 * j, 0.1 * j);
            }
            for (i, f) in base.iter_mut().enumerate() {
                let c = i % 32;
                *f = scale[c] * *f + offset[c];
            }
            let mut noise = Rng::new(self.seed, view_seed).derive(SALT_NOISE);
            add_noise(&mut base, self.noise_sigma, &mut noise);
        }
        let n = view.h() * view.w();
        let mut feat = vec![0.0f64; n * Self::FEAT_DIM];
        for i in 0..n {
            feat[i * 40..i * 40 + 32].copy_from_slice(&base[i * 32..(i + 1) * 32]);
            for c in 0..8 {
                feat[i * 40 + 32 + c] = base[i * 32 + c];
            }
        }
        to_f32_tensor(view.h(), view.w(), Self::FEAT_DIM, feat)
    }
}

impl VisionOperator for StyleLite {
    fn operator_id(&self) -> &'static str {
        "stylelite"
    }
    fn feat_dim(&self) -> usize {
        Self::FEAT_DIM
    }
    fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
    fn inconsistency_kind(&self) -> InconsistencyKind {
        InconsistencyKind::HueJitter
    }

    fn encode(&self, view: &ViewInput, view_seed: u64) -> Tensor<f32> {
        self.encode_inner(view, Some(view_seed))
    }

    fn encode_clean(&self, view: &ViewInput) -> Tensor<f32> {
        self.encode_inner(view, None)
    }

    /// Reads only the first 32 channels, so features truncated to the model
    /// dimension decode identically to native 40-dim features.
    fn decode(&self, feat: &Tensor<f32>) -> DecodedOutput {
        let d = feat.dim(feat.rank() - 1);
        assert!(
            d == Self::FEAT_DIM || d == 32,
            "stylelite decodes 40- or 32-dim features, got {d}"
        );
        let weights = features_to_simplex(feat, d, 32, &self.pinv);
        let mut rgb = blend_palette(&weights);
        for (i, v) in rgb.iter_mut().enumerate() {
            *v = v.clamp(0.0, 1.0).powf(TONE_GAMMA[i % 3]);
        }
        DecodedOutput {
            map: to_f32_tensor(feat.dim(0), feat.dim(1), 3, rgb),
            labels: None,
        }
    }
}

// ---------------------------------------------------------------------------
