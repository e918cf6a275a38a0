//! End-to-end optimization of the lifting pipeline.
//!
//! Every step samples one scene, one target view, and a set of nearby source
//! views, renders a batch of rays through the full pipeline, and minimizes
//!
//! ```text
//! L = mean_rays ‖Î_fine − I‖² + mean_rays ‖Î_coarse − I‖²
//!       + λ_feat · mean_rays ‖Ĝ_fine − G‖²
//! ```
//!
//! where `I` is the ground-truth image and `G` the operator's own per-view
//! feature encoding of the target — including its per-view corruption. The
//! corruptions are independent across views, so the only way to fit all of
//! them at once is to predict their consistent component; the random parts
//! average out.
//!
//! Backward runs in two levels so memory stays bounded: ray shards each
//! build and drop their own graph, handing the gradient of every source
//! feature map to one shared tape that finishes the chain through the
//! feature encoder.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{AdamConfig, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::eval::{masked_mse, nearest_views, COVERAGE_THRESHOLD};
use crate::geometry::Ray;
use crate::operators::{adapt_dim, make_operator, make_operator_with_sigma, ViewInput};
use crate::renderer::{
    encode_rgb_features, init_render_params, render_shard, render_view, RenderConfig,
    SourcePrepared, FEAT_DIM, SHARD_RAYS,
};
use crate::scenes::{build_scene, near_far, view_seed, warp_map, RenderedScene};
use crate::tensorio::{Rng, Tensor};

const SALT_SCENES: u64 = 0x7363_6e70_6f6f_6c31;
const SALT_BATCH: u64 = 0x6261_7463_6873_616d;
const SALT_RAYS: u64 = 0x7261_796a_6974_7465;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    /// Optimizer steps to run in total.
    pub steps: usize,
    /// Rays per optimizer step.
    pub rays_per_step: usize,
    /// Source view count is drawn uniformly from this inclusive range.
    pub sources_min: usize,
    pub sources_max: usize,
    /// Candidate pool factor k is drawn uniformly from 1..=pool_k_max; the
    /// pool holds the k·N nearest views, simulating varying view density.
    pub pool_k_max: usize,
    /// Peak learning rate; cosine-annealed to `lr * lr_final_frac`.
    pub lr: f64,
    pub lr_final_frac: f64,
    /// Weight of the feature term; per-channel scale by default.
    pub lambda_feat: f64,
    pub checkpoint_every: usize,
    /// Operator ids the model trains on.
    pub operators: Vec<String>,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 20_000,
            rays_per_step: 2048,
            sources_min: 8,
            sources_max: 12,
            pool_k_max: 3,
            lr: 5e-4,
            lr_final_frac: 0.1,
            lambda_feat: 1.0 / FEAT_DIM as f64,
            checkpoint_every: 1000,
            operators: vec!["colorquant".into(), "gradfeat".into()],
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.sources_min == 0 || self.sources_min > self.sources_max {
            return Err(Error::Config(format!(
                "source range [{}, {}] is empty",
                self.sources_min, self.sources_max
            )));
        }
        if self.pool_k_max == 0 || self.rays_per_step == 0 || self.steps == 0 {
            return Err(Error::Config(
                "pool_k_max, rays_per_step and steps must be positive".into(),
            ));
        }
        if self.lambda_feat <= 0.0 {
            return Err(Error::Config("lambda_feat must be positive".into()));
        }
        if self.operators.is_empty() {
            return Err(Error::Config("at least one training operator".into()));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate at a 0-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        let fin = self.lr * self.lr_final_frac;
        fin + (self.lr - fin) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

// ---------------------------------------------------------------------------
// training data

/// Scenes plus cached per-view operator encodings (native width, noisy —
/// each view encoded with its own view seed).
pub struct TrainPool {
    pub scenes: Vec<RenderedScene>,
    /// feats[operator_id][scene][view] = [H, W, D'].
    pub feats: BTreeMap<String, Vec<Vec<Tensor<f32>>>>,
}

/// Deterministic seed of the i-th training scene under a pool seed.
pub fn scene_seed(pool_seed: u64, index: usize) -> u64 {
    Rng::new(pool_seed, SALT_SCENES)
        .derive(index as u64)
        .next_u64()
}

/// Generate scenes and cache every operator's noisy encoding of every view.
/// Operator instances are seeded with the pool seed, so the same pool seed
/// always denotes the same tasks.
pub fn build_train_pool(
    pool_seed: u64,
    n_scenes: usize,
    n_views: usize,
    width: usize,
    height: usize,
    operator_ids: &[String],
) -> Result<TrainPool> {
    let scenes: Vec<RenderedScene> = (0..n_scenes)
        .map(|i| build_scene(scene_seed(pool_seed, i), n_views, width, height).1)
        .collect();
    let mut feats = BTreeMap::new();
    for id in operator_ids {
        let op = make_operator(id, pool_seed)?;
        let per_scene: Vec<Vec<Tensor<f32>>> = scenes
            .iter()
            .map(|scene| {
                scene
                    .views
                    .iter()
                    .enumerate()
                    .map(|(v, view)| {
                        let input = ViewInput::new(&view.rgb, &view.labels);
                        op.encode(&input, view_seed(scene.manifest.seed, v))
                    })
                    .collect()
            })
            .collect();
        feats.insert(id.clone(), per_scene);
    }
    Ok(TrainPool { scenes, feats })
}

// ---------------------------------------------------------------------------
// batch sampling

#[derive(Debug, Clone)]
pub struct Batch {
    pub scene: usize,
    pub target: usize,
    pub sources: Vec<usize>,
    /// Row-major pixel indices into the target image, one per ray.
    pub pixels: Vec<usize>,
    pub operator: String,
    /// Pool factor drawn for this batch (diagnostics).
    pub k: usize,
}

/// Draw one batch: uniform scene, uniform target view, the k·N nearest
/// views as a candidate pool, N sources without replacement from the pool,
/// and uniform ray pixels. Scenes with fewer than `sources_max + 1` views
/// are skipped with a warning.
///
/// Draw order from `rng`: scene (repeated on skip), target, N, k, pool
/// shuffle, operator, pixels.
pub fn sample_batch(
    scenes: &[RenderedScene],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<Batch> {
    let scene = {
        let mut found = None;
        for _ in 0..scenes.len().max(1) {
            let i = rng.below(scenes.len());
            if scenes[i].views.len() >= config.sources_max + 1 {
                found = Some(i);
                break;
            }
            log::warn!(
                "scene {i} has {} views, need {}; skipped",
                scenes[i].views.len(),
                config.sources_max + 1
            );
        }
        found.ok_or_else(|| {
            Error::Config(format!(
                "no scene has the {} views required",
                config.sources_max + 1
            ))
        })?
    };
    let sc = &scenes[scene];
    let n_views = sc.views.len();
    let target = rng.below(n_views);
    let n = config.sources_min + rng.below(config.sources_max - config.sources_min + 1);
    let k = 1 + rng.below(config.pool_k_max);
    let pool_size = (k * n).min(n_views - 1);
    let mut pool = nearest_views(&sc.cameras, target, pool_size);
    rng.shuffle(&mut pool);
    pool.truncate(n);
    let operator = config.operators[rng.below(config.operators.len())].clone();
    let px_count = sc.manifest.width * sc.manifest.height;
    let pixels = (0..config.rays_per_step)
        .map(|_| rng.below(px_count))
        .collect();
    Ok(Batch {
        scene,
        target,
        sources: pool,
        pixels,
        operator,
        k,
    })
}

// ---------------------------------------------------------------------------
// one optimizer step

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    /// Sum of the fine and coarse image terms.
    pub rgb: f64,
    /// Feature term before the λ weighting.
    pub feat: f64,
}

/// Forward/backward over one batch, accumulating gradients into the store.
/// Ray shards run on their own tapes; the feature-encoder tape finishes the
/// chain from the per-source feature-map gradients the shards hand back.
pub fn train_step(
    pool: &TrainPool,
    config: &TrainConfig,
    store: &mut ParamStore<f32>,
    step: usize,
) -> Result<StepLosses> {
    let master = Rng::new(config.seed, step as u64);
    let mut batch_rng = master.derive(SALT_BATCH);
    let ray_seed = master.derive(SALT_RAYS).next_u64();
    let batch = sample_batch(&pool.scenes, config, &mut batch_rng)?;
    let scene = &pool.scenes[batch.scene];
    let feats = &pool.feats[&batch.operator][batch.scene];
    let (near, far) = near_far(scene.manifest.bound_radius);
    let target_cam = &scene.cameras[batch.target];
    let width = scene.manifest.width;

    let sources: Vec<SourcePrepared<f32>> = batch
        .sources
        .iter()
        .map(|&v| SourcePrepared::new(&scene.cameras[v], &scene.views[v].rgb, &feats[v]))
        .collect();

    // level 1: the shared feature-encoder tape
    let mut tape_f = Tape::<f32>::new();
    let fmap_nodes: Vec<_> = sources
        .iter()
        .map(|s| encode_rgb_features(&mut tape_f, store, s.rgb))
        .collect();
    let fmap_values: Vec<Tensor<f32>> =
        fmap_nodes.iter().map(|&n| tape_f.value(n).clone()).collect();

    // per-ray supervision rows
    let t_rgb_full = &scene.views[batch.target].rgb;
    let g_full = adapt_dim(&feats[batch.target], FEAT_DIM);

    let total = batch.pixels.len();
    let mut fmap_grads: Vec<Tensor<f32>> = fmap_values
        .iter()
        .map(|v| Tensor::zeros(v.dims()))
        .collect();
    let mut rgb_loss = 0.0;
    let mut feat_loss = 0.0;

    // level 2: ray shards, each on its own tape
    for chunk in batch.pixels.chunks(SHARD_RAYS) {
        let r = chunk.len();
        let frac = r as f64 / total as f64;
        let base = (chunk.as_ptr() as usize - batch.pixels.as_ptr() as usize)
            / std::mem::size_of::<usize>();
        let rays: Vec<Ray> = chunk
            .iter()
            .map(|&p| target_cam.ray_for_pixel((p % width) as f64, (p / width) as f64))
            .collect();
        let mut rngs: Vec<Rng> = (0..r)
            .map(|j| Rng::new(ray_seed, (base + j) as u64))
            .collect();
        let mut tape = Tape::<f32>::new();
        let leaves: Vec<_> = fmap_values
            .iter()
            .map(|v| tape.leaf_with_grad(v.clone()))
            .collect();
        let out = render_shard(
            &mut tape,
            store,
            &sources,
            &leaves,
            &rays,
            near,
            far,
            &config.render,
            &mut rngs,
        );
        let t_rgb = {
            let mut data = Vec::with_capacity(r * 3);
            for &p in chunk {
                data.extend_from_slice(&t_rgb_full.data()[p * 3..p * 3 + 3]);
            }
            tape.constant(Tensor::from_vec(&[r, 3], data))
        };
        let t_feat = {
            let mut data = Vec::with_capacity(r * FEAT_DIM);
            for &p in chunk {
                data.extend_from_slice(&g_full.data()[p * FEAT_DIM..(p + 1) * FEAT_DIM]);
            }
            tape.constant(Tensor::from_vec(&[r, FEAT_DIM], data))
        };
        let l_fine = tape.mse_rows(out.fine_rgb, t_rgb);
        let l_feat = tape.mse_rows(out.fine_feat, t_feat);
        rgb_loss += tape.value(l_fine).data()[0] as f64 * frac;
        feat_loss += tape.value(l_feat).data()[0] as f64 * frac;
        let mut loss = l_fine;
        if let Some(c_rgb) = out.coarse_rgb {
            let l_coarse = tape.mse_rows(c_rgb, t_rgb);
            rgb_loss += tape.value(l_coarse).data()[0] as f64 * frac;
            loss = tape.add(loss, l_coarse);
        }
        let l_feat_w = tape.scale(l_feat, config.lambda_feat);
        loss = tape.add(loss, l_feat_w);
        let loss = tape.scale(loss, frac);
        tape.backward(loss);
        tape.accumulate_grads_into(store);
        for (i, &leaf) in leaves.iter().enumerate() {
            if let Some(g) = tape.grad(leaf) {
                let dst = fmap_grads[i].data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += *s;
                }
            }
        }
    }

    // close the chain through the feature encoder
    for (i, &node) in fmap_nodes.iter().enumerate().rev() {
        tape_f.backward_from(node, fmap_grads[i].clone());
    }
    tape_f.accumulate_grads_into(store);

    Ok(StepLosses {
        rgb: rgb_loss,
        feat: feat_loss,
    })
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub rgb_loss: f64,
    pub feat_loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub logs: Vec<StepLog>,
    pub final_checkpoint: PathBuf,
}

/// Run (or resume) training. Checkpoints land in `out_dir/step_NNNNNN` every
/// `checkpoint_every` steps, plus `out_dir/final`; metrics append to
/// `out_dir/metrics.csv`. A non-finite loss or gradient aborts immediately,
/// leaving the newest checkpoint on disk untouched.
pub fn train(
    pool: &TrainPool,
    config: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    for id in &config.operators {
        if !pool.feats.contains_key(id) {
            return Err(Error::Config(format!("pool lacks operator {id}")));
        }
    }
    let mut store: ParamStore<f32> = match resume_from {
        Some(dir) => ParamStore::load(dir)?,
        None => init_render_params(config.seed, &config.render),
    };
    let start = store.step_count;
    if start >= config.steps {
        return Err(Error::Config(format!(
            "checkpoint already has {start} steps, config asks for {}",
            config.steps
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if start == 0 {
        writeln!(metrics, "step,rgb_loss,feat_loss,lr").map_err(|e| Error::io(&metrics_path, e))?;
    }

    let mut logs = Vec::with_capacity(config.steps - start);
    for step in start..config.steps {
        store.zero_grads();
        let losses = train_step(pool, config, &mut store, step)?;
        let total = losses.rgb + config.lambda_feat * losses.feat;
        if !total.is_finite() || !store.grads_all_finite() {
            log::error!("non-finite loss or gradient at step {step}; aborting");
            return Err(Error::Diverged { step });
        }
        let lr = config.lr_at(step);
        store.adam_step(&AdamConfig {
            lr,
            ..AdamConfig::default()
        });
        writeln!(
            metrics,
            "{},{:.8e},{:.8e},{:.8e}",
            step, losses.rgb, losses.feat, lr
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        logs.push(StepLog {
            step,
            rgb_loss: losses.rgb,
            feat_loss: losses.feat,
            lr,
        });
        let done = step + 1;
        if done % config.checkpoint_every == 0 && done < config.steps {
            store.save(out_dir.join(format!("step_{done:06}")))?;
        }
    }
    let final_dir = out_dir.join("final");
    store.save(&final_dir)?;
    Ok(TrainReport {
        logs,
        final_checkpoint: final_dir,
    })
}

// ---------------------------------------------------------------------------
// noise-cancellation probe

#[derive(Debug, Clone, Copy)]
pub struct NoiseProbeRow {
    pub sigma: f64,
    /// MSE of the rendered feature map against the clean encoding.
    pub rendered_mse: f64,
    /// Mean over source views of the MSE of that view's noisy features
    /// warped into the target frame against the clean encoding.
    pub single_view_mse: f64,
}

/// For each noise level, compare rendering from noisy per-view encodings
/// against the single-view baseline: warp one noisy view's features to the
/// target with ground-truth geometry and measure against the clean
/// encoding. Both sides share the mask where the warp is valid and the
/// render covered the pixel.
#[allow(clippy::too_many_arguments)]
pub fn noise_cancellation_probe(
    store: &ParamStore<f32>,
    scene: &RenderedScene,
    operator_id: &str,
    op_seed: u64,
    sigmas: &[f64],
    target: usize,
    source_ids: &[usize],
    config: &RenderConfig,
    seed: u64,
) -> Result<Vec<NoiseProbeRow>> {
    let (near, far) = near_far(scene.manifest.bound_radius);
    let target_cam = &scene.cameras[target];
    let t_view = &scene.views[target];
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let op = make_operator_with_sigma(operator_id, op_seed, sigma)?;
        let clean = adapt_dim(
            &op.encode_clean(&ViewInput::new(&t_view.rgb, &t_view.labels)),
            FEAT_DIM,
        );
        let noisy: Vec<Tensor<f32>> = source_ids
            .iter()
            .map(|&v| {
                let view = &scene.views[v];
                op.encode(
                    &ViewInput::new(&view.rgb, &view.labels),
                    view_seed(scene.manifest.seed, v),
                )
            })
            .collect();
        let sources: Vec<SourcePrepared<f32>> = source_ids
            .iter()
            .zip(&noisy)
            .map(|(&v, feat)| SourcePrepared::new(&scene.cameras[v], &scene.views[v].rgb, feat))
            .collect();
        let rendered = render_view(store, &sources, target_cam, near, far, config, seed);
        let covered: Vec<bool> = rendered
            .acc
            .data()
            .iter()
            .map(|&w| w > COVERAGE_THRESHOLD)
            .collect();

        let mut single_acc = 0.0;
        let mut single_n = 0usize;
        let mut joint_mask_any = vec![false; covered.len()];
        for (&v, feat) in source_ids.iter().zip(&noisy) {
            let adapted = adapt_dim(feat, FEAT_DIM);
            let warped = warp_map(
                &adapted,
                &scene.cameras[v],
                &scene.views[v].depth,
                target_cam,
                &t_view.depth,
            );
            let mask: Vec<bool> = warped
                .valid
                .iter()
                .zip(&covered)
                .map(|(&a, &b)| a && b)
                .collect();
            if mask.iter().any(|&m| m) {
                single_acc += masked_mse(&warped.map, &clean, &mask)?;
                single_n += 1;
                for (j, &m) in mask.iter().enumerate() {
                    joint_mask_any[j] |= m;
                }
            }
        }
        if single_n == 0 {
            return Err(Error::VoidRender);
        }
        let rendered_mse = masked_mse(&rendered.feat, &clean, &joint_mask_any)?;
        rows.push(NoiseProbeRow {
            sigma,
            rendered_mse,
            single_view_mse: single_acc / single_n as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::RenderMode;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            seed: 11,
            steps: 100,
            rays_per_step: 32,
            sources_min: 3,
            sources_max: 4,
            pool_k_max: 3,
            checkpoint_every: 40,
            operators: vec!["colorquant".into(), "gradfeat".into()],
            render: RenderConfig {
                n_coarse: 6,
                n_fine: 6,
                ..RenderConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_pool(config: &TrainConfig) -> TrainPool {
        build_train_pool(config.seed, 1, 13, 24, 24, &config.operators).unwrap()
    }

    #[test]
    fn batch_sampling_respects_protocol_ranges() {
        let config = TrainConfig {
            rays_per_step: 16,
            ..TrainConfig::default()
        };
        let pool = build_train_pool(3, 2, 16, 8, 8, &[]).unwrap();
        let mut rng = Rng::new(9, 0);
        let mut k_counts = [0usize; 3];
        for _ in 0..10_000 {
            let b = sample_batch(&pool.scenes, &config, &mut rng).unwrap();
            assert!(b.scene < 2);
            assert!(b.target < 16);
            assert!(!b.sources.contains(&b.target), "target leaked into sources");
            assert!(b.sources.len() >= 8 && b.sources.len() <= 12);
            let mut dedup = b.sources.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), b.sources.len(), "sources must be distinct");
            assert!(b.pixels.iter().all(|&p| p < 64));
            assert_eq!(b.pixels.len(), 16);
            assert!((1..=3).contains(&b.k));
            k_counts[b.k - 1] += 1;
            assert!(config.operators.contains(&b.operator));
        }
        for (i, &c) in k_counts.iter().enumerate() {
            let freq = c as f64 / 10_000.0;
            assert!(
                (freq - 1.0 / 3.0).abs() < 0.02,
                "k={} frequency {freq}",
                i + 1
            );
        }
    }

    #[test]
    fn pool_factor_one_takes_exactly_the_nearest_views() {
        let config = TrainConfig {
            pool_k_max: 1,
            rays_per_step: 4,
            ..TrainConfig::default()
        };
        let pool = build_train_pool(5, 1, 16, 8, 8, &[]).unwrap();
        let mut rng = Rng::new(2, 0);
        for _ in 0..50 {
            let b = sample_batch(&pool.scenes, &config, &mut rng).unwrap();
            let expect = nearest_views(&pool.scenes[0].cameras, b.target, b.sources.len());
            let mut got = b.sources.clone();
            got.sort_unstable();
            let mut expect = expect;
            expect.sort_unstable();
            assert_eq!(got, expect, "k=1 must select the N nearest views");
        }
    }

    #[test]
    fn scenes_without_enough_views_are_skipped() {
        let config = TrainConfig::default();
        let pool = build_train_pool(4, 1, 5, 8, 8, &[]).unwrap();
        let mut rng = Rng::new(1, 0);
        assert!(matches!(
            sample_batch(&pool.scenes, &config, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_offset_arithmetic() {
        // a constant 0.1 error per rgb channel with exact features costs
        // 3·0.01 per ray in each image term
        let mut tape = Tape::<f64>::new();
        let pred = tape.constant(Tensor::full(&[5, 3], 0.6));
        let gt = tape.constant(Tensor::full(&[5, 3], 0.5));
        let l = tape.mse_rows(pred, gt);
        let per_term = tape.value(l).data()[0];
        assert!((per_term - 0.03).abs() < 1e-12);
        assert!((2.0 * per_term - 0.06).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        let config = tiny_config();
        let pool = tiny_pool(&config);
        let mut store = init_render_params::<f32>(config.seed, &config.render);
        // the residual head starts at zero, which blocks gradient to the
        // layers feeding it at exactly the init point; one update moves it,
        // after which every group must receive gradient
        store.zero_grads();
        train_step(&pool, &config, &mut store, 0).unwrap();
        assert!(store.grad_sup_norm("corr.f2.w2") > 0.0);
        assert!(store.grad_sup_norm("corr.f2.b2") > 0.0);
        store.adam_step(&AdamConfig::default());
        store.zero_grads();
        train_step(&pool, &config, &mut store, 1).unwrap();
        let mut dead: Vec<String> = store
            .names()
            .into_iter()
            .filter(|n| store.grad_sup_norm(n) == 0.0)
            .collect();
        // the predict head only participates in predict mode
        dead.retain(|n| !n.starts_with("predict."));
        assert!(dead.is_empty(), "dead parameters in full mode: {dead:?}");

        let pconfig = TrainConfig {
            render: RenderConfig {
                mode: RenderMode::Predict,
                ..config.render.clone()
            },
            ..config.clone()
        };
        let mut store = init_render_params::<f32>(config.seed, &pconfig.render);
        store.zero_grads();
        train_step(&pool, &pconfig, &mut store, 0).unwrap();
        for n in ["predict.w1", "predict.b1", "predict.w2", "predict.b2"] {
            assert!(
                store.grad_sup_norm(n) > 0.0,
                "{n} must receive gradient in predict mode"
            );
        }
    }

    #[test]
    fn smoke_training_decreases_loss_and_writes_artifacts() {
        // one operator and a bigger ray batch keep the loss trajectory
        // comparable step to step
        let config = TrainConfig {
            rays_per_step: 64,
            operators: vec!["colorquant".into()],
            ..tiny_config()
        };
        let pool = tiny_pool(&config);
        let dir = tempfile::tempdir().unwrap();
        let report = train(&pool, &config, dir.path(), None).unwrap();
        assert_eq!(report.logs.len(), 100);
        let first: f64 = report.logs[..20].iter().map(|l| l.rgb_loss).sum::<f64>() / 20.0;
        let last: f64 = report.logs[80..].iter().map(|l| l.rgb_loss).sum::<f64>() / 20.0;
        assert!(
            last < first,
            "loss should decrease: first 20 avg {first}, last 20 avg {last}"
        );
        assert!(report.final_checkpoint.join("checkpoint.json").is_file());
        assert!(dir.path().join("step_000040").is_dir());
        assert!(dir.path().join("step_000080").is_dir());
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("step,rgb_loss,feat_loss,lr"));
        assert_eq!(csv.lines().count(), 101);
        // cosine schedule endpoints
        assert!((report.logs[0].lr - config.lr).abs() < 1e-12);
        assert!(report.logs.last().unwrap().lr > config.lr * config.lr_final_frac);
    }

    #[test]
    fn resuming_reproduces_the_fresh_loss_trajectory() {
        let config = TrainConfig {
            steps: 6,
            checkpoint_every: 3,
            ..tiny_config()
        };
        let pool = tiny_pool(&config);
        let fresh_dir = tempfile::tempdir().unwrap();
        let fresh = train(&pool, &config, fresh_dir.path(), None).unwrap();

        let resumed_dir = tempfile::tempdir().unwrap();
        let resumed = train(
            &pool,
            &config,
            resumed_dir.path(),
            Some(&fresh_dir.path().join("step_000003")),
        )
        .unwrap();
        assert_eq!(resumed.logs.len(), 3);
        for (a, b) in fresh.logs[3..].iter().zip(&resumed.logs) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.rgb_loss.to_bits(), b.rgb_loss.to_bits());
            assert_eq!(a.feat_loss.to_bits(), b.feat_loss.to_bits());
        }
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let config = TrainConfig {
            steps: 3,
            ..tiny_config()
        };
        let pool = tiny_pool(&config);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train(&pool, &config, d1.path(), None).unwrap();
        let b = train(&pool, &config, d2.path(), None).unwrap();
        for (x, y) in a.logs.iter().zip(&b.logs) {
            assert_eq!(x.rgb_loss.to_bits(), y.rgb_loss.to_bits());
            assert_eq!(x.feat_loss.to_bits(), y.feat_loss.to_bits());
        }
    }

    #[test]
    fn noise_probe_reports_finite_rows_per_sigma() {
        let config = TrainConfig {
            sources_min: 3,
            sources_max: 3,
            ..tiny_config()
        };
        let pool = tiny_pool(&config);
        let store = init_render_params::<f32>(1, &config.render);
        let scene = &pool.scenes[0];
        let sources = nearest_views(&scene.cameras, 0, 3);
        let rows = noise_cancellation_probe(
            &store,
            scene,
            "colorquant",
            config.seed,
            &[0.05, 0.2],
            0,
            &sources,
            &config.render,
            9,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.rendered_mse.is_finite() && row.rendered_mse > 0.0);
            assert!(row.single_view_mse.is_finite() && row.single_view_mse > 0.0);
        }
        // more corruption must hurt the single-view baseline
        assert!(rows[1].single_view_mse > rows[0].single_view_mse);
    }

    #[test]
    fn lr_schedule_hits_both_endpoints() {
        let config = TrainConfig::default();
        assert!((config.lr_at(0) - 5e-4).abs() < 1e-15);
        assert!((config.lr_at(20_000) - 5e-5).abs() < 1e-15);
        let mid = config.lr_at(10_000);
        assert!((mid - 0.5 * (5e-4 + 5e-5)).abs() < 1e-10);
    }
}

