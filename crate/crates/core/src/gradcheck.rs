//! Central finite-difference gradient oracle.
//!
//! Every differentiable component is checked with the same protocol: step
//! `h = 1e-5` in 64-bit arithmetic, element-wise relative error
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;
pub const REL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: FD_STEP,
            floor: REL_FLOOR,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (tensor index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, cfg: &GradCheck, tensor: usize, elem: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(cfg.floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((tensor, elem, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst);
        }
    }
}

/// Compares backward-pass gradients of `f` with respect to each input
/// tensor against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheck) -> Result<GradReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.var(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&g, &vars)?;
        Ok(g.scalar(loss))
    };
    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        for e in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + cfg.step;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - cfg.step;
            let down = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            report.record(&cfg, ti, e, analytic[ti].data()[e], (up - down) / (2.0 * cfg.step));
        }
    }
    Ok(report)
}

/// Same protocol over parameters held in a store. `ids` restricts the check
/// to a subset; `None` checks every parameter.
pub fn check_param_gradients<F>(store: &ParamStore, ids: Option<&[ParamId]>, f: F, cfg: GradCheck) -> Result<GradReport>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let ids: Vec<ParamId> = ids.map(<[ParamId]>::to_vec).unwrap_or_else(|| store.ids().collect());
    let analytic = {
        let g = Graph::with_params(store, true);
        let loss = f(&g)?;
        let grads = g.backward(loss)?;
        g.param_grads(&grads)
    };
    let mut work = store.clone();
    let mut report = GradReport::default();
    for &id in &ids {
        for e in 0..store.get(id).numel() {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + cfg.step;
            let up = {
                let g = Graph::with_params(&work, false);
                let l = f(&g)?;
                g.scalar(l)
            };
            work.get_mut(id).data_mut()[e] = orig - cfg.step;
            let down = {
                let g = Graph::with_params(&work, false);
                let l = f(&g)?;
                g.scalar(l)
            };
            work.get_mut(id).data_mut()[e] = orig;
            let a = analytic.get(id).map_or(0.0, |g| g[e]);
            report.record(&cfg, id.index(), e, a, (up - down) / (2.0 * cfg.step));
        }
    }
    Ok(report)
}
