//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Random coordinates probed per tensor, in addition to its largest-gradient coordinate.
    pub probes: usize,
    /// Base step; the step at coordinate `θ` is `step · max(1, |θ|)`.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 4,
            step: 1e-6,
            tolerance: 1e-5,
            denominator_floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub group: ParamGroup,
    pub probes: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Analytic gradients of `loss` w.r.t. the parameters in `ids`.
pub fn analytic_gradients<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    loss: &F,
) -> Result<Gradients<f64>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut mask = vec![false; store.len()];
    for id in ids {
        mask[id.index()] = true;
    }
    let mut g = Graph::with_trainable(store, mask);
    let out = loss(&mut g)?;
    Ok(g.backward(out))
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let out = loss(&mut g)?;
    Ok(g.scalar(out))
}

/// Compares the supplied analytic gradients with central differences of `loss`.
pub fn compare_gradients<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    analytic: &Gradients<f64>,
    loss: &F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(ids.len());
    for &id in ids {
        let len = store.value(id).len();
        let zeros = vec![0.0; len];
        let grad = analytic
            .param(id)
            .map_or(zeros.as_slice(), |m| m.as_slice());
        let mut coords: Vec<usize> = sample(&mut rng, len, cfg.probes.min(len)).into_vec();
        let largest = (0..len).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()));
        if let Some(i) = largest.filter(|i| !coords.contains(i)) {
            coords.push(i);
        }
        let mut entry = GradCheckEntry {
            name: store.get(id).name.clone(),
            group: store.get(id).group,
            probes: coords.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in coords {
            let theta = store.value(id).as_slice()[i];
            let h = cfg.step * theta.abs().max(1.0);
            work.value_mut(id).as_mut_slice()[i] = theta + h;
            let up = eval(&work, loss)?;
            work.value_mut(id).as_mut_slice()[i] = theta - h;
            let down = eval(&work, loss)?;
            work.value_mut(id).as_mut_slice()[i] = theta;
            let numeric = (up - down) / (2.0 * h);
            entry.max_abs_error = entry.max_abs_error.max((grad[i] - numeric).abs());
            entry.max_rel_error =
                entry
                    .max_rel_error
                    .max(relative_error(grad[i], numeric, cfg.denominator_floor));
        }
        entries.push(entry);
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= cfg.tolerance,
        max_rel_error,
        tolerance: cfg.tolerance,
        entries,
    })
}

/// Analytic gradients of `loss` checked against central differences.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    loss: &F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, ids, loss)?;
    compare_gradients(store, ids, &analytic, loss, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;

    fn linear_toy() -> (ParamStore<f64>, ParamId, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let w = s.insert(
            "w",
            ParamGroup::Probe,
            Matrix::random_normal(3, 2, 1.0, &mut rng),
        );
        let b = s.insert(
            "b",
            ParamGroup::Probe,
            Matrix::random_normal(1, 2, 1.0, &mut rng),
        );
        (s, w, b)
    }

    fn linear_loss(w: ParamId, b: ParamId) -> impl Fn(&mut Graph<'_, f64>) -> Result<Var> {
        move |g: &mut Graph<'_, f64>| {
            let x = g.input(Matrix::from_vec(1, 3, vec![0.3, -1.1, 0.7]));
            let (wv, bv) = (g.param(w), g.param(b));
            let y = g.matmul(x, wv);
            let y = g.add_row(y, bv);
            Ok(g.sum_all(y))
        }
    }

    #[test]
    fn linear_model_is_exact() {
        let (s, w, b) = linear_toy();
        let r =
            check_gradients(&s, &[w, b], &linear_loss(w, b), &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert!(r.passed);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (s, w, b) = linear_toy();
        let loss = linear_loss(w, b);
        let mut grads = analytic_gradients(&s, &[w, b], &loss).unwrap();
        grads.param_mut(w).unwrap().as_mut_slice()[0] += 0.01;
        let cfg = GradCheckConfig {
            probes: 6,
            ..GradCheckConfig::default()
        };
        let r = compare_gradients(&s, &[w, b], &grads, &loss, &cfg).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst().unwrap().name, "w");
    }
}
