//! Deterministic fixtures shared by the pipeline benchmarks.

use lift3d_core::autodiff::ParamStore;
use lift3d_core::renderer::{init_render_params, RenderConfig};
use lift3d_core::training::{build_train_pool, TrainConfig, TrainPool};

/// A small training fixture: `n_scenes` scenes of `views` views at
/// `side`×`side` with cached colorquant features, plus a matching config and
/// a freshly initialized parameter store. `steps` is set high so benchmarks
/// can step the optimizer as often as they like without finishing the
/// schedule.
pub fn fixture(
    n_scenes: usize,
    views: usize,
    side: usize,
    rays_per_step: usize,
) -> (TrainPool, TrainConfig, ParamStore<f32>) {
    let sources_max = 6.min(views.saturating_sub(1)).max(1);
    let config = TrainConfig {
        seed: 11,
        steps: 1_000_000,
        rays_per_step,
        sources_min: 4.min(sources_max),
        sources_max,
        pool_k_max: 2,
        checkpoint_every: usize::MAX,
        operators: vec!["colorquant".into()],
        render: RenderConfig {
            n_coarse: 16,
            n_fine: 16,
            ..RenderConfig::default()
        },
        ..TrainConfig::default()
    };
    let pool = build_train_pool(
        config.seed,
        n_scenes,
        views,
        side,
        side,
        &config.operators,
    )
    .expect("building the benchmark pool");
    let store = init_render_params(config.seed, &config.render);
    (pool, config, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_well_formed() {
        let (pool, config, store) = fixture(1, 6, 16, 32);
        assert_eq!(pool.scenes.len(), 1);
        assert_eq!(pool.scenes[0].views.len(), 6);
        assert!(pool.feats.contains_key("colorquant"));
        // a batch must always leave one view over as the target
        assert!(config.sources_max < pool.scenes[0].views.len());
        assert!(store.len() > 0);
    }
}
