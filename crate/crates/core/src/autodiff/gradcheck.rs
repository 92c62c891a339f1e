//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Tensors with more elements than this are checked on a random subset of this size.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_elements: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// `false` when two evaluations at the same point disagreed.
    pub deterministic: bool,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradient of `loss` w.r.t. every parameter in `store` with
/// central differences. `loss` records a scalar on the graph it is handed.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let analytic = {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        let grads = g.backward(l)?;
        g.accumulate_param_grads(&grads, store);
        store.iter().map(|p| p.grad.clone()).collect::<Vec<_>>()
    };

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        let v = g.value(l);
        if v.len() != 1 {
            return Err(contract_err!("loss must be scalar, got shape {:?}", v.shape()));
        }
        Ok(v.data()[0])
    };

    let base = eval(store)?;
    let mut deterministic = base.to_bits() == eval(store)?.to_bits();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = grad.len();
        let picks: Vec<usize> = if n > cfg.max_elements {
            let mut v = sample(&mut rng, n, cfg.max_elements).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.eps;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
            let down = eval(store)?;
            if i == picks[0] {
                store.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
                deterministic &= down.to_bits() == eval(store)?.to_bits();
            }
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let err = relative_error(grad.data()[i], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: deterministic && max_rel_error <= cfg.tol,
        params,
        max_rel_error,
        deterministic,
    })
}
