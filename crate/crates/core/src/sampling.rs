//! Ray-depth sampling: stratified coarse samples, inverse-transform
//! importance samples from coarse compositing weights, and the sorted merge
//! feeding the fine pass.
//!
//! Importance sampling treats the K coarse weights as masses over K
//! intervals whose boundaries are the midpoints between consecutive coarse
//! depths, padded with [near, far] at the ends. A small floor keeps every
//! interval reachable so the fine pass never collapses onto the coarse
//! argmax.

use crate::tensorio::Rng;

pub const WEIGHT_FLOOR: f64 = 1e-5;

/// Sorted sample depths along one ray, with the range they were drawn from.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub near: f64,
    pub far: f64,
    pub ts: Vec<f64>,
}

impl RaySamples {
    pub fn new(near: f64, far: f64, ts: Vec<f64>) -> Self {
        debug_assert!(near > 0.0 && near < far, "bad range {near}..{far}");
        debug_assert!(!ts.is_empty());
        debug_assert!(
            ts.windows(2).all(|w| w[0] < w[1]),
            "sample depths must be strictly increasing"
        );
        debug_assert!(ts[0] >= near && *ts.last().unwrap() <= far);
        RaySamples { near, far, ts }
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Compositing step sizes: delta_j = t_{j+1} - t_j, and far - t_K for the
    /// last sample.
    pub fn deltas(&self) -> Vec<f64> {
        let k = self.ts.len();
        let mut d = Vec::with_capacity(k);
        for j in 0..k - 1 {
            d.push(self.ts[j + 1] - self.ts[j]);
        }
        d.push(self.far - self.ts[k - 1]);
        d
    }

    /// Interval boundaries for importance sampling: near, midpoints between
    /// consecutive samples, far. One interval per sample.
    pub fn interval_bounds(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.ts.len() + 1);
        b.push(self.near);
        for w in self.ts.windows(2) {
            b.push(0.5 * (w[0] + w[1]));
        }
        b.push(self.far);
        b
    }
}

/// One jittered sample per uniform bin of [near, far].
pub fn stratified(near: f64, far: f64, k: usize, rng: &mut Rng) -> RaySamples {
    assert!(k >= 1, "need at least one sample");
    assert!(near > 0.0 && near < far, "bad range {near}..{far}");
    let step = (far - near) / k as f64;
    let mut ts = Vec::with_capacity(k);
    for i in 0..k {
        ts.push(near + (i as f64 + rng.uniform()) * step);
    }
    RaySamples::new(near, far, ts)
}

/// M samples from the piecewise-constant density proportional to
/// (weights + floor) over the midpoint intervals of `coarse`. All weights
/// exactly zero signals a degenerate coarse pass; that falls back to
/// stratified sampling rather than failing.
pub fn importance(coarse: &RaySamples, weights: &[f64], m: usize, rng: &mut Rng) -> RaySamples {
    assert_eq!(
        weights.len(),
        coarse.len(),
        "one weight per coarse sample"
    );
    assert!(m >= 1);
    assert!(
        weights.iter().all(|w| w.is_finite() && *w >= 0.0),
        "weights must be finite and nonnegative"
    );
    if weights.iter().all(|&w| w == 0.0) {
        log::debug!("importance sampling fell back to stratified: all weights zero");
        return stratified(coarse.near, coarse.far, m, rng);
    }
    let bounds = coarse.interval_bounds();
    let masses: Vec<f64> = weights.iter().map(|w| w + WEIGHT_FLOOR).collect();
    let mut cum = Vec::with_capacity(masses.len() + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for w in &masses {
        acc += w;
        cum.push(acc);
    }
    let total = acc;
    let mut ts = Vec::with_capacity(m);
    for _ in 0..m {
        let u = rng.uniform() * total;
        // first interval with cum[j + 1] > u
        let j = match cum[1..].iter().position(|&c| c > u) {
            Some(j) => j,
            None => masses.len() - 1,
        };
        let frac = (u - cum[j]) / masses[j];
        ts.push(bounds[j] + frac * (bounds[j + 1] - bounds[j]));
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dedup_nudge(&mut ts, coarse.far);
    RaySamples::new(coarse.near, coarse.far, ts)
}

/// Sorted union of two sample sets over the same range.
pub fn merge(a: &RaySamples, b: &RaySamples) -> RaySamples {
    debug_assert_eq!(a.near, b.near);
    debug_assert_eq!(a.far, b.far);
    let mut ts = Vec::with_capacity(a.len() + b.len());
    ts.extend_from_slice(&a.ts);
    ts.extend_from_slice(&b.ts);
    ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    dedup_nudge(&mut ts, a.far);
    RaySamples::new(a.near, a.far, ts)
}

/// Ties have probability zero for continuous draws but would break the
/// strictly-increasing invariant; nudge duplicates up by one ulp-ish step.
fn dedup_nudge(ts: &mut [f64], far: f64) {
    for i in 1..ts.len() {
        if ts[i] <= ts[i - 1] {
            let bumped = next_up(ts[i - 1]);
            ts[i] = bumped.min(far);
            if ts[i] <= ts[i - 1] {
                // at the far boundary: nudge the predecessor down instead
                ts[i - 1] = ts[i] - f64::EPSILON * far.abs().max(1.0);
            }
        }
    }
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}
