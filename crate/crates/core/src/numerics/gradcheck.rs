//! Central finite-difference verification of analytic gradients.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Relative step: each element moves by `step * max(1, |w|)`.
    pub step: f32,
    pub tol: f32,
    /// Elements sampled per parameter; smaller parameters are checked in full.
    pub per_param: usize,
    pub seed: u64,
    pub threads: usize,
    /// Differentiate through `detach`, checking the derivative of the loss
    /// value rather than the stop-gradient training signal.
    pub through_detach: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-2,
            per_param: 64,
            seed: 0,
            threads: 1,
            through_detach: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f32,
    pub numeric: f32,
    pub rel_err: f32,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params_checked: usize,
    pub elements_checked: usize,
    pub max_rel_err: f32,
    pub worst_param: Option<String>,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Names of parameters with at least one failing element, deduplicated.
    pub fn failing_params(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.failures.iter().map(|f| f.param.as_str()).collect();
        names.dedup();
        names
    }
}

fn graph(cfg: &GradCheckConfig) -> Graph {
    if cfg.through_detach {
        Graph::with_transparent_detach()
    } else {
        Graph::new()
    }
}

fn eval<F>(f: &F, store: &mut ParamStore, cfg: &GradCheckConfig) -> Result<f32>
where
    F: Fn(&Graph, &mut ParamStore) -> Result<Var>,
{
    let g = graph(cfg);
    let loss = f(&g, store)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss ({v})")));
    }
    Ok(v)
}

/// Central difference of one element, restoring it afterwards.
fn central<F>(f: &F, store: &mut ParamStore, id: ParamId, idx: usize, cfg: &GradCheckConfig) -> Result<f32>
where
    F: Fn(&Graph, &mut ParamStore) -> Result<Var>,
{
    let orig = store.value(id).data()[idx];
    let h = cfg.step * orig.abs().max(1.0);
    let (up, down) = (orig + h, orig - h);
    store.value_mut(id).data_mut()[idx] = up;
    let lp = eval(f, store, cfg);
    store.value_mut(id).data_mut()[idx] = down;
    let lm = eval(f, store, cfg);
    store.value_mut(id).data_mut()[idx] = orig;
    Ok((lp? - lm?) / (up - down))
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences for `params`.
///
/// `f` must be a deterministic function of the store values. It may update
/// buffers (e.g. running statistics) as long as the returned loss does not
/// depend on them. Elements are spread over `cfg.threads` workers, each on
/// its own copy of the store; the report does not depend on the count.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &mut ParamStore) -> Result<Var> + Sync,
{
    let analytic: HashMap<ParamId, Vec<f32>> = {
        let g = graph(cfg);
        let loss = f(&g, store)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss ({v})")));
        }
        let grads = g.backward(loss)?;
        grads
            .param_grads()
            .map(|(id, t)| (id, t.data().to_vec()))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tasks = Vec::new();
    for &id in params {
        let numel = store.value(id).numel();
        let mut indices: Vec<usize> = if numel <= cfg.per_param {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, cfg.per_param).into_vec()
        };
        indices.sort_unstable();
        tasks.extend(indices.into_iter().map(|idx| (id, idx)));
    }

    let workers = cfg.threads.clamp(1, tasks.len().max(1));
    let mut numeric: Vec<Option<Result<f32>>> = (0..tasks.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, &(id, idx)) in numeric.iter_mut().zip(&tasks) {
            *slot = Some(central(&f, store, id, idx, cfg));
        }
    } else {
        let shared: &ParamStore = store;
        let results: Vec<Vec<(usize, Result<f32>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (f, tasks) = (&f, &tasks);
                    let mut local = shared.clone();
                    scope.spawn(move || {
                        (w..tasks.len())
                            .step_by(workers)
                            .map(|t| {
                                let (id, idx) = tasks[t];
                                (t, central(f, &mut local, id, idx, cfg))
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("gradcheck worker panicked")).collect()
        });
        for (t, r) in results.into_iter().flatten() {
            numeric[t] = Some(r);
        }
    }

    let mut report = GradCheckReport::default();
    let mut last: Option<ParamId> = None;
    for (&(id, idx), n) in tasks.iter().zip(numeric) {
        let numeric = n.expect("every task ran")?;
        let name = &store.get(id).name;
        let a = analytic.get(&id).map_or(0.0, |g| g[idx]);
        let rel_err = (a - numeric).abs() / numeric.abs().max(1.0);
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst_param = Some(name.clone());
        }
        if rel_err.is_nan() || rel_err >= cfg.tol {
            report.failures.push(GradCheckFailure {
                param: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_err,
            });
        }
        report.elements_checked += 1;
        if last != Some(id) {
            report.params_checked += 1;
            last = Some(id);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1], vec![3.0]).unwrap());
        let report = grad_check(&mut store, &[w], &GradCheckConfig::default(), |g, s| {
            let x = g.param(s, w);
            Ok(g.sum(g.square(x)))
        })
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.elements_checked, 1);
        assert!(report.max_rel_err < 1e-3);
    }

    #[test]
    fn sign_flipped_backward_is_reported() {
        let mut store = ParamStore::new();
        let good = store.add("good", Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
        let bad = store.add("bad", Tensor::new(vec![2], vec![2.0, 1.0]).unwrap());
        let report = grad_check(&mut store, &[good, bad], &GradCheckConfig::default(), |g, s| {
            let a = g.sum(g.square(g.param(s, good)));
            // value is sum(b²) but the recorded gradient is -2b
            let b2 = g.sum(g.square(g.param(s, bad)));
            let flipped = g.sub(g.scale(g.detach(b2), 2.0), b2)?;
            g.add(a, flipped)
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing_params(), vec!["bad"]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let err = grad_check(&mut store, &[w], &GradCheckConfig::default(), |g, s| {
            let x = g.param(s, w);
            let nan = g.constant(Tensor::scalar(f32::NAN));
            g.mul(x, nan).map(|v| g.sum(v))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
