use std::collections::BTreeMap;

use super::ParamSet;
use crate::corpus::subsample;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Which coordinates to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coords {
    All,
    Sample { n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Worst relative error per parameter tensor that had a checked coordinate.
    pub per_param: BTreeMap<String, f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `analytic` against central differences of `loss` around `params`.
pub fn grad_check<F>(params: &ParamSet, analytic: &ParamSet, mut loss: F, eps: f64, coords: Coords) -> GradCheckReport
where
    F: FnMut(&ParamSet) -> f64,
{
    assert!(params.same_layout(analytic), "gradient layout differs from parameters");
    let all: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
        .collect();
    let chosen = match coords {
        Coords::All => all,
        Coords::Sample { n, seed } => subsample(&all, n, seed),
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        per_param: BTreeMap::new(),
    };
    for (name, i) in chosen {
        let orig = params.t(&name).data()[i];
        work.t_mut(&name).data_mut()[i] = orig + eps;
        let lp = loss(&work);
        work.t_mut(&name).data_mut()[i] = orig - eps;
        let lm = loss(&work);
        work.t_mut(&name).data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let err = relative_error(analytic.t(&name).data()[i], numeric);
        report.checked += 1;
        let slot = report.per_param.entry(name.clone()).or_insert(0.0);
        *slot = slot.max(err);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name, i));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;

    fn quad() -> (ParamSet, impl Fn(&ParamSet) -> f64, ParamSet) {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let loss = |p: &ParamSet| p.t("a").data().iter().map(|x| x * x * x).sum::<f64>();
        let mut g = p.zeros_like();
        for (gi, x) in g.t_mut("a").data_mut().iter_mut().zip(p.t("a").data()) {
            *gi = 3.0 * x * x;
        }
        (p, loss, g)
    }

    #[test]
    fn exact_gradient_passes() {
        let (p, loss, g) = quad();
        let r = grad_check(&p, &g, loss, DEFAULT_EPS, Coords::All);
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (p, loss, mut g) = quad();
        g.t_mut("a").data_mut()[1] *= 1.1;
        let r = grad_check(&p, &g, loss, DEFAULT_EPS, Coords::All);
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst, Some(("a".to_string(), 1)));
    }

    #[test]
    fn sampling_limits_coordinates() {
        let (p, loss, g) = quad();
        let r = grad_check(&p, &g, loss, DEFAULT_EPS, Coords::Sample { n: 2, seed: 1 });
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
