//! Finite-difference gradient verification. Rebuilds the scalar objective at
//! perturbed parameter values and compares centered differences against the
//! analytic gradients collected on the tape. Run in f64: central differences
//! carry ~1e-10 truncation error at eps ~1e-5, far below the tolerance.



use super::params::ParamStore;
use super::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic parameter gradients of a scalar objective against
/// central finite differences. `build` must construct the full forward pass
/// from the given store and return the scalar output node. `stride` checks
/// every `stride`-th entry of each parameter (1 = exhaustive).
pub fn grad_check(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> NodeId,
    stride: usize,
) -> GradCheckReport {
    assert!(stride >= 1);
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let out = build(&mut tape, s);
        let v = tape.value(out);
        assert_eq!(v.len(), 1, "gradient check needs a scalar objective");
        v.data()[0]
    };

    let mut tape = Tape::new();
    let out = build(&mut tape, store);
    tape.backward(out);
    let mut grads: ParamStore<f64> = store.clone();
    grads.zero_grads();
    tape.accumulate_grads_into(&mut grads);

    let mut report = GradCheckReport {
        worst_rel: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let names = store.names();
    let mut work = store.clone();
    for name in &names {
        let n = store.value(name).len();
        let mut k = 0;
        while k < n {
            let x = store.value(name).data()[k];
            let eps = 1e-5 * (1.0 + x.abs());
            set_entry(&mut work, name, k, x + eps);
            let fp = eval(&work);
            set_entry(&mut work, name, k, x - eps);
            let fm = eval(&work);
            set_entry(&mut work, name, k, x);
            let fd = (fp - fm) / (2.0 * eps);
            let an = grads.grad(name).data()[k];
            let rel = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = name.clone();
                report.worst_index = k;
            }
            k += stride;
        }
    }
    report
}

fn set_entry(store: &mut ParamStore<f64>, name: &str, k: usize, v: f64) {
    store.value_mut(name).data_mut()[k] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::{Rng, Tensor};

    #[test]
    fn grad_check_passes_on_small_mlp() {
        let mut rng = Rng::new(5, 0);
        let mut store = ParamStore::<f64>::new();
        super::super::params::init_linear(&mut store, "w1", "b1", 3, 5, &mut rng);
        super::super::params::init_linear(&mut store, "w2", "b2", 5, 2, &mut rng);
        let xs: Vec<f64> = (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let ys: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.1, 0.9)).collect();
        let x = Tensor::from_vec(&[4, 3], xs);
        let y = Tensor::from_vec(&[4, 2], ys);
        let build = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let xin = tape.constant(x.clone());
            let w1 = tape.param(s, "w1");
            let b1 = tape.param(s, "b1");
            let w2 = tape.param(s, "w2");
            let b2 = tape.param(s, "b2");
            let h = tape.linear(xin, w1, b1);
            let h = tape.softplus(h);
            let o = tape.linear(h, w2, b2);
            let o = tape.sigmoid(o);
            let target = tape.constant(y.clone());
            tape.mse_rows(o, target)
        };
        let report = grad_check(&store, &build, 1);
        assert!(
            report.worst_rel < 1e-6,
            "worst {} at {}[{}] over {} checks",
            report.worst_rel,
            report.worst_param,
            report.worst_index,
            report.checked
        );
        assert_eq!(report.checked, 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn grad_check_catches_a_broken_gradient() {
        // Objective reads the parameter through a graph, but we corrupt the
        // analytic answer by scaling the objective only in the tape pass via
        // a mismatched build closure pair: simplest honest check is that a
        // deliberately wrong derivative is flagged. We emulate one by
        // comparing sigmoid against a build that uses relu for the FD side.
        let mut store = ParamStore::<f64>::new();
        store.insert("p", Tensor::from_vec(&[2, 2], vec![0.3, -0.4, 0.9, 0.2]));
        let toggle = std::cell::Cell::new(false);
        let build = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let p = tape.param(s, "p");
            let h = if toggle.get() {
                tape.relu(p)
            } else {
                // first call (analytic pass) sees sigmoid
                toggle.set(true);
                tape.sigmoid(p)
            };
            let t = tape.constant(Tensor::zeros(&[2, 2]));
            tape.mse_rows(h, t)
        };
        let report = grad_check(&store, &build, 1);
        assert!(report.worst_rel > 1e-3, "mismatch went undetected");
    }
}
