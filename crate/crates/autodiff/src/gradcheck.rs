//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::AutodiffError;
use crate::graph::Var;
use crate::params::ParamStore;
use crate::session::Session;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on probed coordinates per parameter tensor; `None` probes all.
    pub max_probes_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_probes_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over probes of |analytic − central| / max(1, |central|)
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub probes: usize,
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences. Discrete selections made during the first pass are replayed
/// in every perturbed pass.
pub fn finite_diff_check<E, F>(store: &ParamStore, opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Session<'_>) -> Result<Var, E>,
{
    let mut work = store.clone();
    let (analytic, tape) = {
        let mut s = Session::new(&work);
        let loss = f(&mut s)?;
        let grads = s.param_grads(loss)?;
        (grads, s.into_tape().into_replay())
    };

    let mut eval = |work: &ParamStore| -> Result<f64, E> {
        let mut s = Session::with_tape(work, tape.clone());
        let loss = f(&mut s)?;
        let v = s.value(loss);
        if v.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()).into());
        }
        Ok(v.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        let n = work.get(id).numel();
        let probes: Vec<usize> = match opts.max_probes_per_param {
            Some(cap) if cap < n => {
                let mut v = sample(&mut rng, n, cap).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in probes {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;

            let central = (up - down) / (2.0 * opts.eps);
            let a = analytic[id.index()].data()[i];
            let err = (a - central).abs() / central.abs().max(1.0);
            report.probes += 1;
            if report.worst_param.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(work.name(id).to_string());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_at_three() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0)).unwrap();
        let analytic = {
            let mut s = Session::new(&store);
            let v = s.param(w);
            let y = s.graph.mul(v, v).unwrap();
            s.param_grads(y).unwrap()[0].item()
        };
        assert_eq!(analytic, 6.0);
        let report = finite_diff_check::<AutodiffError, _>(&store, &GradCheckOptions::default(), |s| {
            let v = s.param(w);
            s.graph.mul(v, v)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.probes, 1);
    }

    #[test]
    fn probe_cap_is_respected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[10], 0.5)).unwrap();
        let opts = GradCheckOptions {
            max_probes_per_param: Some(3),
            ..Default::default()
        };
        let report = finite_diff_check::<AutodiffError, _>(&store, &opts, |s| {
            let v = s.param(w);
            let y = s.graph.mul(v, v)?;
            s.graph.sum_all(y)
        })
        .unwrap();
        assert_eq!(report.probes, 3);
    }
}
