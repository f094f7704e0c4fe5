use super::graph::{Graph, Var};
use crate::params::ParamStore;

/// Central finite-difference check settings.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Maximum entries probed per tensor (evenly strided); `usize::MAX` for all.
    pub max_entries: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(name, relative error)` per parameter tensor, where the error is
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// probed entries.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst_name(&self) -> Option<&str> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n.as_str())
    }
}

fn evaluate(store: &ParamStore, build: &impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    g.item(out)
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences for every parameter in `store` that the graph touches.
pub fn check_param_gradients(
    store: &ParamStore,
    opts: GradCheck,
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    let grads = g.backward(out).into_param_grads(store);

    let mut per_param = Vec::new();
    let mut probe = store.clone();
    for (name, analytic) in &grads {
        let n = analytic.len();
        let stride = n.div_ceil(opts.max_entries.min(n).max(1));
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride.max(1)) {
            let orig = store.get(name).unwrap().data[i];
            probe.get_mut(name).unwrap().data[i] = orig + opts.step;
            let up = evaluate(&probe, &build);
            probe.get_mut(name).unwrap().data[i] = orig - opts.step;
            let down = evaluate(&probe, &build);
            probe.get_mut(name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data[i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale < 1e-11 { diff2.sqrt() } else { diff2.sqrt() / scale };
        per_param.push((name.clone(), rel));
    }
    GradCheckReport { per_param }
}
