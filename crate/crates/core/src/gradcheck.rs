//! Central finite-difference verification of analytic gradients.
//!
//! Perturbs every scalar of every trainable parameter, so callers keep the
//! parameter count small (reduced widths). Relative error uses a small floor
//! so near-zero gradient pairs do not inflate the ratio.

use crate::params::ParamSet;
use crate::tape::{Graph, NodeId};
use alloc::string::String;
use alloc::vec::Vec;

/// Default central-difference step, chosen for 64-bit floats.
pub const FD_STEP: f64 = 1e-5;

const REL_FLOOR: f64 = 1e-6;

pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub per_param: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` rebuilds the forward pass from the bound parameters each call and
/// returns the scalar loss node. The parameter count must be small enough to
/// perturb exhaustively (enforced at 10^4 scalars).
pub fn grad_check(
    params: &mut ParamSet,
    tolerance: f64,
    loss_fn: impl Fn(&mut Graph, &crate::params::Bound) -> NodeId,
) -> GradReport {
    assert!(
        params.num_scalars() < 10_000,
        "grad_check is exhaustive; got {} scalars",
        params.num_scalars()
    );

    let eval = |ps: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let loss = loss_fn(&mut g, &bound);
        assert_eq!(g.value(loss).len(), 1, "grad_check loss must be scalar");
        g.value(loss).data()[0]
    };

    // Analytic pass.
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = loss_fn(&mut g, &bound);
    g.backward(loss);
    let analytic = bound.grads(&g);

    let mut per_param = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();

    let ids: Vec<_> = params.ids().collect();
    for pid in ids {
        if !params.is_trainable(pid) {
            continue;
        }
        let name = String::from(params.name(pid));
        let n = params.get(pid).len();
        let mut param_worst = 0.0f64;
        for e in 0..n {
            let orig = params.get(pid).data()[e];
            params.get_mut(pid).data_mut()[e] = orig + FD_STEP;
            let up = eval(params);
            params.get_mut(pid).data_mut()[e] = orig - FD_STEP;
            let down = eval(params);
            params.get_mut(pid).data_mut()[e] = orig;

            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pid.index()].data()[e];
            let denom = crate::math::abs(a).max(crate::math::abs(fd)).max(REL_FLOOR);
            let rel = crate::math::abs(a - fd) / denom;
            param_worst = param_worst.max(rel);
        }
        if param_worst > max_rel_err {
            max_rel_err = param_worst;
            worst_param = name.clone();
        }
        per_param.push((name, param_worst));
    }

    GradReport { max_rel_err, worst_param, per_param, tolerance }
}
