//! Quantitative evaluation: masked feature error, cross-view warp
//! consistency, label IoU, PSNR, source-count sweeps, and PCA feature
//! visualization.
//!
//! The 2D per-view baseline and the lifted 3D outputs are always measured
//! through the same functions here, so comparisons between them never mix
//! metric conventions.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::operators::{adapt_dim, VisionOperator};
use crate::renderer::{render_view, RenderConfig, RenderMode, SourcePrepared, ViewRender, FEAT_DIM};
use crate::scenes::{near_far, warp_map, RenderedScene};
use crate::tensorio::Tensor;

/// Fraction of pixels a warp mask must cover for a view pair to count.
pub const MIN_MASK_FRACTION: f64 = 0.05;

/// Rendered accumulated weight above which a pixel counts as covered.
pub const COVERAGE_THRESHOLD: f32 = 0.5;

// ---------------------------------------------------------------------------
// pixel metrics

/// Mean squared difference over masked pixels, averaged over pixels and
/// channels. `pred` and `target` are [H, W, C] (or any shape with the same
/// pixel count); `mask` is row-major per pixel.
pub fn masked_mse(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &[bool]) -> Result<f64> {
    let c = pred.dim(pred.rank() - 1);
    assert_eq!(pred.dims(), target.dims(), "shape mismatch");
    assert_eq!(pred.len() / c, mask.len(), "mask must be per pixel");
    let mut acc = 0.0;
    let mut n = 0usize;
    for (px, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for ch in 0..c {
            let d = pred.data()[px * c + ch] as f64 - target.data()[px * c + ch] as f64;
            acc += d * d;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::VoidRender);
    }
    Ok(acc / (n * c) as f64)
}

/// Feature error of a rendered view against a reference feature map,
/// restricted to pixels the renderer actually covered (accumulated weight
/// above [`COVERAGE_THRESHOLD`]). The reference is adapted to the model
/// width first.
pub fn feature_mse(rendered: &ViewRender, reference: &Tensor<f32>) -> Result<f64> {
    let reference = adapt_dim(reference, FEAT_DIM);
    let mask: Vec<bool> = rendered
        .acc
        .data()
        .iter()
        .map(|&w| w > COVERAGE_THRESHOLD)
        .collect();
    masked_mse(&rendered.feat, &reference, &mask)
}

/// Peak signal-to-noise ratio in dB for signals in [0, 1]; identical inputs
/// clamp to 99.
pub fn psnr(pred: &Tensor<f32>, gt: &Tensor<f32>) -> f64 {
    assert_eq!(pred.dims(), gt.dims());
    let mut acc = 0.0;
    for (a, b) in pred.data().iter().zip(gt.data()) {
        let d = *a as f64 - *b as f64;
        acc += d * d;
    }
    let mse = acc / pred.len() as f64;
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

/// Intersection over union of one label id; an empty union counts as a
/// perfect match.
pub fn iou(pred: &[u8], gt: &[u8], label: u8) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let (pp, gg) = (p == label, g == label);
        if pp && gg {
            inter += 1;
        }
        if pp || gg {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU over every non-background label present in either map; no
/// labels at all counts as a perfect match.
pub fn mean_iou(pred: &[u8], gt: &[u8]) -> f64 {
    let mut present = [false; 256];
    for &l in pred.iter().chain(gt) {
        present[l as usize] = true;
    }
    let labels: Vec<u8> = (1..=255u8).filter(|&l| present[l as usize]).collect();
    if labels.is_empty() {
        return 1.0;
    }
    labels.iter().map(|&l| iou(pred, gt, l)).sum::<f64>() / labels.len() as f64
}

// ---------------------------------------------------------------------------
// cross-view consistency

/// Masked RMSE between `map_a` warped into view B and `map_b`, using ground
/// truth geometry for the warp. Returns the RMSE and the mask size, or None
/// when the occlusion-valid mask covers less than [`MIN_MASK_FRACTION`] of
/// the image.
pub fn warp_consistency_rmse(
    map_a: &Tensor<f32>,
    cam_a: &Camera,
    depth_a: &[f64],
    map_b: &Tensor<f32>,
    cam_b: &Camera,
    depth_b: &[f64],
) -> Option<(f64, usize)> {
    let warped = warp_map(map_a, cam_a, depth_a, cam_b, depth_b);
    let n_valid = warped.valid.iter().filter(|&&v| v).count();
    let n_px = warped.valid.len();
    if (n_valid as f64) < MIN_MASK_FRACTION * n_px as f64 {
        log::warn!(
            "warp mask covers {n_valid}/{n_px} pixels, below the {MIN_MASK_FRACTION} floor; pair skipped"
        );
        return None;
    }
    let c = map_b.dim(map_b.rank() - 1);
    let mut acc = 0.0;
    for (px, &keep) in warped.valid.iter().enumerate() {
        if !keep {
            continue;
        }
        for ch in 0..c {
            let d = warped.map.data()[px * c + ch] as f64 - map_b.data()[px * c + ch] as f64;
            acc += d * d;
        }
    }
    Some(((acc / (n_valid * c) as f64).sqrt(), n_valid))
}

/// View index pairs for consistency protocols over a camera rig in its
/// construction order: short range pairs adjacent views, long range pairs
/// the first and last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRange {
    Short,
    Long,
}

pub fn view_pairs(n_views: usize, range: PairRange) -> Vec<(usize, usize)> {
    match range {
        PairRange::Short => (0..n_views.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
        PairRange::Long => {
            if n_views < 2 {
                vec![]
            } else {
                vec![(0, n_views - 1)]
            }
        }
    }
}

/// Mean of [`warp_consistency_rmse`] over the given pairs of per-view maps;
/// None when every pair was skipped for mask coverage.
pub fn pairs_rmse(
    maps: &[Tensor<f32>],
    scene: &RenderedScene,
    pairs: &[(usize, usize)],
) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for &(a, b) in pairs {
        if let Some((rmse, _)) = warp_consistency_rmse(
            &maps[a],
            &scene.cameras[a],
            &scene.views[a].depth,
            &maps[b],
            &scene.cameras[b],
            &scene.views[b].depth,
        ) {
            acc += rmse;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(acc / n as f64)
    }
}

// ---------------------------------------------------------------------------
// view selection and lifted rendering

/// Indices of the `count` views nearest to `target` by camera-center
/// distance, excluding the target itself. Ties break by index so the result
/// is deterministic.
pub fn nearest_views(cameras: &[Camera], target: usize, count: usize) -> Vec<usize> {
    let c0 = cameras[target].center();
    let mut order: Vec<usize> = (0..cameras.len()).filter(|&i| i != target).collect();
    order.sort_by(|&a, &b| {
        let da = (cameras[a].center() - c0).norm();
        let db = (cameras[b].center() - c0).norm();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

/// Render the target view of a scene from the given source views, whose
/// operator feature maps are supplied per view (native width, [H, W, D']).
pub fn lift_view(
    store: &ParamStore<f32>,
    scene: &RenderedScene,
    feats: &[Tensor<f32>],
    source_ids: &[usize],
    target: usize,
    config: &RenderConfig,
    seed: u64,
) -> ViewRender {
    let sources: Vec<SourcePrepared<f32>> = source_ids
        .iter()
        .map(|&i| SourcePrepared::new(&scene.cameras[i], &scene.views[i].rgb, &feats[i]))
        .collect();
    let (near, far) = near_far(scene.manifest.bound_radius);
    render_view(
        store,
        &sources,
        &scene.cameras[target],
        near,
        far,
        config,
        seed,
    )
}

/// Decode a rendered feature map back to an operator's native output space:
/// the [H, W, FEAT_DIM] prediction is re-adapted to the operator's width and
/// decoded with its own head.
pub fn decode_rendered(op: &dyn VisionOperator, rendered: &ViewRender) -> crate::operators::DecodedOutput {
    let native = adapt_dim(&rendered.feat, op.feat_dim());
    op.decode(&native)
}

/// IoU of decoded label predictions for several source-view counts: each
/// entry is (count, mean IoU against the target view's ground truth labels).
#[allow(clippy::too_many_arguments)]
pub fn views_sweep(
    store: &ParamStore<f32>,
    scene: &RenderedScene,
    feats: &[Tensor<f32>],
    op: &dyn VisionOperator,
    counts: &[usize],
    target: usize,
    config: &RenderConfig,
    seed: u64,
) -> Vec<(usize, f64)> {
    counts
        .iter()
        .map(|&count| {
            let sources = nearest_views(&scene.cameras, target, count);
            let rendered = lift_view(store, scene, feats, &sources, target, config, seed);
            let decoded = decode_rendered(op, &rendered);
            let labels = decoded
                .labels
                .expect("views_sweep needs a label-decoding operator");
            (count, mean_iou(&labels, &scene.views[target].labels))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// scene-level protocols

/// Metrics of the lifted pipeline in one render mode over a set of target
/// views. Consistency numbers are None when every pair fell below the mask
/// floor; IoU is None for operators that do not decode labels.
#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub mode: String,
    pub operator_id: String,
    pub n_targets: usize,
    pub n_sources: usize,
    /// Mean over targets of the masked MSE between the rendered features and
    /// the operator's own encoding of that target view.
    pub feature_mse: f64,
    /// Mean PSNR of the rendered RGB against ground truth.
    pub psnr: f64,
    /// Cross-view RMSE of the decoded lifted outputs, adjacent view pairs.
    pub rmse_short: Option<f64>,
    /// Cross-view RMSE of the decoded lifted outputs, first/last pair.
    pub rmse_long: Option<f64>,
    /// Mean IoU of decoded labels against ground truth over targets.
    pub iou: Option<f64>,
}

/// The same metrics for the per-view 2D pipeline (operator applied to each
/// view independently, no lifting), measured through identical code paths.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineReport {
    pub operator_id: String,
    pub n_targets: usize,
    pub rmse_short: Option<f64>,
    pub rmse_long: Option<f64>,
    pub iou: Option<f64>,
}

/// Short- and long-range cross-view consistency of per-target maps:
/// `maps[i]` is a prediction at view `targets[i]`, warped pairwise with the
/// scene's ground-truth geometry. Either entry is None when every pair of
/// that range fell below the valid-mask floor.
pub fn consistency_of_maps(
    maps: &[Tensor<f32>],
    scene: &RenderedScene,
    targets: &[usize],
) -> (Option<f64>, Option<f64>) {
    let warp_pair = |a: usize, b: usize| -> Option<f64> {
        warp_consistency_rmse(
            &maps[a],
            &scene.cameras[targets[a]],
            &scene.views[targets[a]].depth,
            &maps[b],
            &scene.cameras[targets[b]],
            &scene.views[targets[b]].depth,
        )
        .map(|(rmse, _)| rmse)
    };
    let mean = |pairs: Vec<(usize, usize)>| -> Option<f64> {
        let vals: Vec<f64> = pairs.iter().filter_map(|&(a, b)| warp_pair(a, b)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let short = mean(view_pairs(targets.len(), PairRange::Short));
    let long = mean(view_pairs(targets.len(), PairRange::Long));
    (short, long)
}

/// Evaluate the lifted pipeline on one scene for each render mode: every
/// target view is rendered from its `n_sources` nearest views, features are
/// compared against the operator's own target encoding, decoded outputs are
/// scored for cross-view consistency and (for label operators) IoU.
/// `op_feats` holds the operator's per-view encodings used both as source
/// inputs and as the naive per-view reference.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_scene(
    store: &ParamStore<f32>,
    scene: &RenderedScene,
    op: &dyn VisionOperator,
    op_feats: &[Tensor<f32>],
    modes: &[RenderMode],
    targets: &[usize],
    n_sources: usize,
    base_config: &RenderConfig,
    seed: u64,
) -> Result<Vec<ModeReport>> {
    assert!(!targets.is_empty(), "need at least one target view");
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let config = RenderConfig {
            mode,
            ..base_config.clone()
        };
        let mut mse_acc = 0.0;
        let mut psnr_acc = 0.0;
        let mut iou_acc = 0.0;
        let mut iou_n = 0usize;
        let mut decoded_maps = Vec::with_capacity(targets.len());
        for &t in targets {
            let sources = nearest_views(&scene.cameras, t, n_sources);
            let rendered = lift_view(store, scene, op_feats, &sources, t, &config, seed);
            mse_acc += feature_mse(&rendered, &op_feats[t])?;
            psnr_acc += psnr(&rendered.rgb, &scene.views[t].rgb);
            let decoded = decode_rendered(op, &rendered);
            if let Some(labels) = &decoded.labels {
                iou_acc += mean_iou(labels, &scene.views[t].labels);
                iou_n += 1;
            }
            decoded_maps.push(decoded.map);
        }
        let (rmse_short, rmse_long) = consistency_of_maps(&decoded_maps, scene, targets);
        reports.push(ModeReport {
            mode: mode.as_str().to_string(),
            operator_id: op.operator_id().to_string(),
            n_targets: targets.len(),
            n_sources,
            feature_mse: mse_acc / targets.len() as f64,
            psnr: psnr_acc / targets.len() as f64,
            rmse_short,
            rmse_long,
            iou: if iou_n > 0 {
                Some(iou_acc / iou_n as f64)
            } else {
                None
            },
        });
    }
    Ok(reports)
}

/// Score the per-view 2D pipeline on the same targets with the same
/// functions: decode each view's own encoding and measure consistency and
/// IoU directly.
pub fn baseline_2d(
    scene: &RenderedScene,
    op: &dyn VisionOperator,
    op_feats: &[Tensor<f32>],
    targets: &[usize],
) -> BaselineReport {
    let mut iou_acc = 0.0;
    let mut iou_n = 0usize;
    let mut decoded_maps = Vec::with_capacity(targets.len());
    for &t in targets {
        let decoded = op.decode(&op_feats[t]);
        if let Some(labels) = &decoded.labels {
            iou_acc += mean_iou(labels, &scene.views[t].labels);
            iou_n += 1;
        }
        decoded_maps.push(decoded.map);
    }
    let (rmse_short, rmse_long) = consistency_of_maps(&decoded_maps, scene, targets);
    BaselineReport {
        operator_id: op.operator_id().to_string(),
        n_targets: targets.len(),
        rmse_short,
        rmse_long,
        iou: if iou_n > 0 {
            Some(iou_acc / iou_n as f64)
        } else {
            None
        },
    }
}

// ---------------------------------------------------------------------------
// PCA visualization

/// Centered principal directions of a pixel-feature matrix: eigenvalues
/// (descending) and matching eigenvectors as rows, plus the column mean.
fn pca_directions(rows: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            mean[j] += rows[r * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in 0..n {
        for i in 0..d {
            let di = rows[r * d + i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (rows[r * d + j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    cov /= n as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let evals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let evecs: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (evals, evecs, mean)
}

/// Numerical floor below which a principal component counts as absent.
const PCA_RANK_EPS: f64 = 1e-9;

/// Project a [H, W, D] feature map onto its top three centered principal
/// components and min-max normalize each channel to [0, 1]. Components whose
/// eigenvalue vanishes (feature rank below 3) come out as zero channels.
pub fn pca_viz(feat: &Tensor<f32>) -> Tensor<f32> {
    assert_eq!(feat.rank(), 3, "expected [H, W, D]");
    let (h, w, d) = (feat.dim(0), feat.dim(1), feat.dim(2));
    let n = h * w;
    assert!(n >= 3, "PCA needs at least 3 pixels");
    let rows: Vec<f64> = feat.data().iter().map(|&v| v as f64).collect();
    let (evals, evecs, mean) = pca_directions(&rows, n, d);
    let scale0 = evals[0].max(0.0);
    let mut out = vec![0.0f32; n * 3];
    for ch in 0..3.min(d) {
        if evals[ch] <= PCA_RANK_EPS * scale0 || evals[ch] <= 0.0 {
            continue;
        }
        let mut proj = vec![0.0; n];
        for r in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += (rows[r * d + j] - mean[j]) * evecs[ch][j];
            }
            proj[r] = acc;
        }
        let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        for r in 0..n {
            out[r * 3 + ch] = ((proj[r] - lo) / span) as f32;
        }
    }
    Tensor::from_vec(&[h, w, 3], out)
}

/// Mean squared reconstruction error of the pixel-feature matrix from its
/// top `k` centered principal components.
pub fn pca_reconstruction_error(feat: &Tensor<f32>, k: usize) -> f64 {
    assert_eq!(feat.rank(), 3);
    let d = feat.dim(2);
    let n = feat.len() / d;
    let rows: Vec<f64> = feat.data().iter().map(|&v| v as f64).collect();
    let (_, evecs, mean) = pca_directions(&rows, n, d);
    let k = k.min(d);
    let mut acc = 0.0;
    for r in 0..n {
        let centered: Vec<f64> = (0..d).map(|j| rows[r * d + j] - mean[j]).collect();
        let mut recon = vec![0.0; d];
        for v in evecs.iter().take(k) {
            let c: f64 = centered.iter().zip(v).map(|(a, b)| a * b).sum();
            for j in 0..d {
                recon[j] += c * v[j];
            }
        }
        for j in 0..d {
            acc += (centered[j] - recon[j]).powi(2);
        }
    }
    acc / (n * d) as f64
}
