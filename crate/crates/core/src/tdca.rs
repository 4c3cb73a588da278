//! Class-generic spatial filtering by the Fisher criterion over
//! between-class and within-class scatter.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::containers::EpochSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdcaOptions {
    pub n_components: usize,
    /// Ridge added to the within-class scatter, relative to its mean diagonal.
    pub ridge_eps: f64,
    /// Number of delayed channel copies stacked before fitting.
    pub delays: usize,
}

impl Default for TdcaOptions {
    fn default() -> Self {
        Self { n_components: 1, ridge_eps: 1e-6, delays: 0 }
    }
}

/// Fitted spatial filters. Columns of `filters` are unit norm with their
/// largest-magnitude entry positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdcaModel {
    pub filters: DMatrix<f64>,
    pub pattern: DMatrix<f64>,
    pub s_b: DMatrix<f64>,
    pub s_w: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Absolute ridge added to `s_w` when solving.
    pub ridge: f64,
    pub delays: usize,
}

impl TdcaModel {
    /// Model with caller-supplied filters, e.g. for a known projection.
    pub fn from_filters(filters: DMatrix<f64>) -> Result<Self> {
        if filters.ncols() == 0 || filters.nrows() == 0 {
            return Err(Error::arg("filter matrix is empty"));
        }
        let n = filters.nrows();
        Ok(Self {
            pattern: filters.clone(),
            eigenvalues: vec![0.0; filters.ncols()],
            filters,
            s_b: DMatrix::zeros(n, n),
            s_w: DMatrix::zeros(n, n),
            ridge: 0.0,
            delays: 0,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.filters.nrows() / (self.delays + 1)
    }

    pub fn n_components(&self) -> usize {
        self.filters.ncols()
    }

    /// Ratio of between- to (regularized) within-class scatter along `u`.
    pub fn fisher_ratio(&self, u: &DVector<f64>) -> f64 {
        let num = (u.transpose() * &self.s_b * u)[(0, 0)];
        let den = (u.transpose() * &self.s_w * u)[(0, 0)] + self.ridge * u.norm_squared();
        num / den
    }

    /// First filter column.
    pub fn filter(&self) -> DVector<f64> {
        self.filters.column(0).into_owned()
    }

    pub fn apply(&self, trial: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if trial.ncols() != self.n_inputs() {
            return Err(Error::arg(format!(
                "trial has {} channels, filter expects {}",
                trial.ncols(),
                self.n_inputs()
            )));
        }
        Ok(delay_embed(trial, self.delays) * &self.filters)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.filters.ncols() == 0 || m.filters.nrows() % (m.delays + 1) != 0 {
            return Err(Error::Format("spatial model has inconsistent filter shape".into()));
        }
        Ok(m)
    }
}

/// Stack `delays` advanced copies of every channel after the original ones;
/// samples past the end are zero.
pub fn delay_embed(trial: &DMatrix<f64>, delays: usize) -> DMatrix<f64> {
    if delays == 0 {
        return trial.clone();
    }
    let (n, c) = trial.shape();
    DMatrix::from_fn(n, c * (delays + 1), |t, j| {
        let (d, ch) = (j / c, j % c);
        if t + d < n {
            trial[(t + d, ch)]
        } else {
            0.0
        }
    })
}

/// Between-class and within-class scatter, each `n_channels x n_channels`.
pub fn scatter_matrices(epochs: &EpochSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    scatter_of(epochs.trials(), epochs.labels())
}

fn scatter_of(trials: &[DMatrix<f64>], labels: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateScatter(format!("{} class(es); need at least 2", classes.len())));
    }
    if trials.len() < 2 {
        return Err(Error::DegenerateScatter("need at least 2 trials".into()));
    }
    let (n, c) = trials[0].shape();
    let means: Vec<DMatrix<f64>> = classes
        .iter()
        .map(|&k| {
            let mut acc = DMatrix::zeros(n, c);
            let mut count = 0usize;
            for (t, _) in trials.iter().zip(labels).filter(|(_, &l)| l == k) {
                acc += t;
                count += 1;
            }
            acc / count as f64
        })
        .collect();
    let grand = means.iter().fold(DMatrix::zeros(n, c), |a, m| a + m) / means.len() as f64;

    let mut s_b = DMatrix::zeros(c, c);
    for m in &means {
        let d = m - &grand;
        s_b.gemm_tr(1.0, &d, &d, 1.0);
    }
    s_b /= means.len() as f64;

    let mut s_w = DMatrix::zeros(c, c);
    for (t, l) in trials.iter().zip(labels) {
        let k = classes.binary_search(l).expect("label present");
        let d = t - &means[k];
        s_w.gemm_tr(1.0, &d, &d, 1.0);
    }
    s_w /= trials.len() as f64;
    symmetrize(&mut s_b);
    symmetrize(&mut s_w);
    Ok((s_b, s_w))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

pub fn fit_tdca(epochs: &EpochSet, n_components: usize, ridge_eps: f64) -> Result<TdcaModel> {
    fit_tdca_with(epochs, &TdcaOptions { n_components, ridge_eps, delays: 0 })
}

pub fn fit_tdca_with(epochs: &EpochSet, opts: &TdcaOptions) -> Result<TdcaModel> {
    if opts.n_components == 0 {
        return Err(Error::arg("n_components must be at least 1"));
    }
    if !(opts.ridge_eps >= 0.0 && opts.ridge_eps.is_finite()) {
        return Err(Error::arg("ridge_eps must be finite and non-negative"));
    }
    let trials: Vec<DMatrix<f64>> = epochs.trials().iter().map(|t| delay_embed(t, opts.delays)).collect();
    let (s_b, s_w) = scatter_of(&trials, epochs.labels())?;
    let nch = s_w.nrows();
    if opts.n_components > nch {
        return Err(Error::arg(format!("{} components requested from {nch} channels", opts.n_components)));
    }

    let mean_diag = |m: &DMatrix<f64>| m.trace() / nch as f64;
    let ridge = if opts.ridge_eps == 0.0 {
        0.0
    } else if mean_diag(&s_w) > 0.0 {
        opts.ridge_eps * mean_diag(&s_w)
    } else if mean_diag(&s_b) > 0.0 {
        opts.ridge_eps * mean_diag(&s_b)
    } else {
        return Err(Error::DegenerateScatter("between- and within-class scatter are both zero".into()));
    };

    let mut reg = s_w.clone();
    for i in 0..nch {
        reg[(i, i)] += ridge;
    }
    if ridge == 0.0 {
        let ev = SymmetricEigen::new(reg.clone()).eigenvalues;
        let max = ev.amax();
        if max == 0.0 || ev.min() <= 1e-12 * max {
            return Err(Error::SingularWithin);
        }
    }
    let chol = reg.clone().cholesky().ok_or(Error::SingularWithin)?;
    let l = chol.l();
    let l_inv = l.clone().try_inverse().ok_or(Error::SingularWithin)?;
    let mut whitened = &l_inv * &s_b * l_inv.transpose();
    symmetrize(&mut whitened);
    let eig = SymmetricEigen::new(whitened);

    let mut order: Vec<usize> = (0..nch).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lt_inv = l_inv.transpose();
    let mut filters = DMatrix::zeros(nch, opts.n_components);
    let mut eigenvalues = Vec::with_capacity(opts.n_components);
    for (j, &idx) in order.iter().take(opts.n_components).enumerate() {
        let mut u = &lt_inv * eig.eigenvectors.column(idx);
        let norm = u.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateScatter("eigenvector of zero norm".into()));
        }
        u /= norm;
        fix_sign(&mut u);
        filters.set_column(j, &u);
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
    }

    let sigma_x = channel_covariance(&trials);
    let pattern = spatial_pattern(&sigma_x, &filters)?;
    Ok(TdcaModel { filters, pattern, s_b, s_w, eigenvalues, ridge, delays: opts.delays })
}

fn fix_sign(u: &mut DVector<f64>) {
    let imax = u.iamax();
    if u[imax] < 0.0 {
        u.neg_mut();
    }
}

/// Pooled channel covariance with each trial's channel means removed.
pub fn channel_covariance(trials: &[DMatrix<f64>]) -> DMatrix<f64> {
    let c = trials.first().map_or(0, |t| t.ncols());
    let mut acc = DMatrix::zeros(c, c);
    let mut count = 0usize;
    for t in trials {
        let mut d = t.clone();
        for mut col in d.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        acc.gemm_tr(1.0, &d, &d, 1.0);
        count += t.nrows();
    }
    if count > 1 {
        acc /= (count - 1) as f64;
    }
    acc
}

/// Forward pattern `Σx U (Uᵀ Σx U)⁻¹`.
pub fn spatial_pattern(sigma_x: &DMatrix<f64>, filters: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = sigma_x * filters;
    let sigma_s = filters.transpose() * &a;
    let inv = match sigma_s.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => inv,
        _ => {
            log::warn!("filtered source covariance is singular; pattern uses a pseudo-inverse");
            sigma_s.pseudo_inverse(1e-12).map_err(|e| Error::DegenerateScatter(e.to_string()))?
        }
    };
    Ok(a * inv)
}

/// Project every trial onto the model's filters.
pub fn spatial_filter(epochs: &EpochSet, model: &TdcaModel) -> Result<EpochSet> {
    if epochs.n_channels() != model.n_inputs() && epochs.n_trials() > 0 {
        return Err(Error::arg(format!(
            "epochs have {} channels, filter expects {}",
            epochs.n_channels(),
            model.n_inputs()
        )));
    }
    let names = (0..model.n_components()).map(|i| format!("S{}", i + 1)).collect();
    let filters = &model.filters;
    let delays = model.delays;
    epochs.map_trials(epochs.fs_hz(), names, |t| delay_embed(t, delays) * filters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("C{i}")).collect()
    }

    /// Class means ±e1 along `dir`, isotropic noise.
    fn planted(sigma: f64, per_class: usize, dims: usize, seed: u64) -> EpochSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut trials = Vec::new();
        let mut labels = Vec::new();
        for k in 0..2 {
            let sign = if k == 0 { 1.0 } else { -1.0 };
            for _ in 0..per_class {
                trials
                    .push(DMatrix::from_fn(4, dims, |_, c| (if c == 0 { sign } else { 0.0 }) + noise.sample(&mut rng)));
                labels.push(k);
            }
        }
        EpochSet::new(trials, labels, 250.0, names(dims)).unwrap()
    }

    #[test]
    fn identical_trials_have_zero_scatter() {
        let t = DMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64);
        let e = EpochSet::new(vec![t.clone(), t.clone(), t], vec![0, 1, 1], 250.0, names(3)).unwrap();
        let (b, w) = scatter_matrices(&e).unwrap();
        assert!(b.iter().all(|v| *v == 0.0));
        assert!(w.iter().all(|v| *v == 0.0));
        assert!(matches!(fit_tdca(&e, 1, 1e-6), Err(Error::DegenerateScatter(_))));
    }

    #[test]
    fn one_trial_per_class_has_zero_within() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 5.0]);
        let e = EpochSet::new(vec![a, b], vec![0, 1], 250.0, names(2)).unwrap();
        let (_, w) = scatter_matrices(&e).unwrap();
        assert!(w.iter().all(|v| *v == 0.0));
        assert!(matches!(fit_tdca(&e, 1, 0.0), Err(Error::SingularWithin)));
        assert!(fit_tdca(&e, 1, 1e-6).is_ok());
    }

    #[test]
    fn hand_evaluated_between_scatter() {
        let p = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let e = EpochSet::new(vec![p.clone(), -p], vec![0, 1], 250.0, names(2)).unwrap();
        let (b, _) = scatter_matrices(&e).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn single_class_is_degenerate() {
        let e = planted(0.3, 5, 3, 1).select(&[0, 1, 2]).unwrap();
        assert!(matches!(scatter_matrices(&e), Err(Error::DegenerateScatter(_))));
    }

    #[test]
    fn recovers_planted_direction() {
        let e = planted(0.3, 50, 4, 7);
        let m = fit_tdca(&e, 1, 1e-6).unwrap();
        assert!(m.filters[(0, 0)].abs() > 0.95);
        let u = m.filter();
        assert!((m.fisher_ratio(&u) - m.eigenvalues[0]).abs() <= 1e-8 * m.eigenvalues[0].max(1.0));
        assert!((u.norm() - 1.0).abs() < 1e-12);
        assert!(u[u.iamax()] > 0.0);
    }

    #[test]
    fn scale_and_offset_invariance() {
        let e = planted(0.3, 30, 3, 11);
        let base = fit_tdca(&e, 1, 1e-6).unwrap().filter();
        let scaled = e.map_trials(250.0, names(3), |t| t * 10.0).unwrap();
        let s = fit_tdca(&scaled, 1, 1e-6).unwrap().filter();
        assert!((base.dot(&s).abs() - 1.0).abs() < 1e-9);
        let shifted = e.map_trials(250.0, names(3), |t| t.map(|v| v + 3.0)).unwrap();
        let o = fit_tdca(&shifted, 1, 1e-6).unwrap().filter();
        assert!((base.dot(&o).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let e = planted(0.5, 10, 3, 3);
        let m1 = fit_tdca(&e, 2, 1e-6).unwrap();
        let idx: Vec<usize> = (0..e.n_trials()).rev().collect();
        let m2 = fit_tdca(&e.select(&idx).unwrap(), 2, 1e-6).unwrap();
        assert!((m1.filters - m2.filters).amax() < 1e-10);
    }

    #[test]
    fn multi_component_filters_are_within_orthogonal() {
        let e = planted(0.5, 20, 4, 5);
        let m = fit_tdca(&e, 3, 0.0).unwrap();
        let g = m.filters.transpose() * &m.s_w * &m.filters;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(g[(i, j)].abs() < 1e-9 * g[(i, i)].max(g[(j, j)]));
                }
            }
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pattern_of_identity_covariance() {
        let u = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let p = spatial_pattern(&DMatrix::identity(3, 3), &u).unwrap();
        assert_eq!(p, u);
    }

    #[test]
    fn filtering_examples() {
        let ch = DMatrix::from_fn(6, 1, |i, _| (i as f64).sin());
        let t = DMatrix::from_fn(6, 2, |i, _| ch[(i, 0)]);
        let e = EpochSet::new(vec![t], vec![0], 250.0, names(2)).unwrap();
        let sel = TdcaModel::from_filters(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        assert_eq!(spatial_filter(&e, &sel).unwrap().trial(0), &ch);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let avg = TdcaModel::from_filters(DMatrix::from_column_slice(2, 1, &[h, h])).unwrap();
        let out = spatial_filter(&e, &avg).unwrap();
        assert!((out.trial(0) - &ch * 2f64.sqrt()).amax() < 1e-12);
        let zero = EpochSet::new(vec![DMatrix::zeros(6, 2)], vec![0], 250.0, names(2)).unwrap();
        assert!(spatial_filter(&zero, &sel).unwrap().trial(0).iter().all(|v| *v == 0.0));
        let three = TdcaModel::from_filters(DMatrix::from_element(3, 1, 1.0)).unwrap();
        assert!(matches!(spatial_filter(&e, &three), Err(Error::Argument(_))));
    }

    #[test]
    fn delay_embedding_shapes() {
        let t = DMatrix::from_fn(4, 2, |i, j| (10 * j + i) as f64);
        let d = delay_embed(&t, 1);
        assert_eq!(d.shape(), (4, 4));
        assert_eq!(d[(0, 2)], 1.0);
        assert_eq!(d[(3, 3)], 0.0);
        let e = planted(0.3, 10, 3, 2);
        let m = fit_tdca_with(&e, &TdcaOptions { n_components: 1, ridge_eps: 1e-6, delays: 0 }).unwrap();
        assert_eq!(m.n_inputs(), 3);
    }

    #[test]
    fn json_round_trip() {
        let m = fit_tdca(&planted(0.3, 10, 3, 4), 1, 1e-6).unwrap();
        let back = TdcaModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
