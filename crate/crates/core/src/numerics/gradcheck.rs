use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Error;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step, in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Checks at most this many coordinates per parameter tensor (sampled
    /// under `seed`); `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
/// `store` gradients are overwritten; values are restored exactly.
pub fn grad_check<F, E>(
    f: F,
    store: &mut ParamStore,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<Error>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(Error::InvalidConfig(format!("grad_check eps {} outside [1e-7, 1e-3]", cfg.eps)).into());
    }
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(g.scalar(out))
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicFunction { first, second }.into());
    }

    store.zero_grad();
    {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.backward(out, store)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };

    for name in names {
        let len = store.value(&name)?.len();
        let mut coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(m) if m < len => sample(&mut rng, len, m).into_vec(),
            _ => (0..len).collect(),
        };
        coords.sort_unstable();
        for idx in coords {
            let analytic = store.grad(&name)?.data()[idx];
            let orig = store.value(&name)?.data()[idx];

            store.get_mut(&name)?.value.data_mut()[idx] = orig + cfg.eps;
            let plus = eval(store)?;
            store.get_mut(&name)?.value.data_mut()[idx] = orig - cfg.eps;
            let minus = eval(store)?;
            store.get_mut(&name)?.value.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NumArray;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert("x", NumArray::row(vec![0.3, -1.7, 2.5, 4.0]).unwrap());
        let report = grad_check(
            |g: &mut Graph, s: &ParamStore| -> Result<Var, Error> {
                let x = g.param(s, "x")?;
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &mut store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(store.value("x").unwrap().data(), &[0.3, -1.7, 2.5, 4.0]);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let mut store = ParamStore::new();
        store.insert("x", NumArray::scalar(1.0));
        let cfg = GradCheckConfig {
            eps: 0.1,
            ..Default::default()
        };
        let r = grad_check(
            |g: &mut Graph, s: &ParamStore| -> Result<Var, Error> { g.param(s, "x") },
            &mut store,
            &cfg,
        );
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.insert("x", NumArray::scalar(1.0));
        let counter = Cell::new(0.0);
        let r = grad_check(
            |g: &mut Graph, s: &ParamStore| -> Result<Var, Error> {
                counter.set(counter.get() + 1.0);
                let x = g.param(s, "x")?;
                Ok(g.scale(x, counter.get()))
            },
            &mut store,
            &GradCheckConfig::default(),
        );
        assert!(matches!(r, Err(Error::NonDeterministicFunction { .. })));
    }
}
