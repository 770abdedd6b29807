//! Transmitter-side channel prediction.
//!
//! Alice measures one CSI value per training mode, recovers a sparse
//! angle-of-departure profile that explains those values, predicts the CSI of
//! every mode from it and inverts the prediction into a per-mode precoder.
//!
//! Two greedy solvers are provided. [`SolverKind::Omp`] is textbook orthogonal
//! matching pursuit. [`SolverKind::RankAwareOrmp`] is the order-recursive,
//! rank-aware variant: when the dictionary is real, the real and imaginary
//! parts of the measurement are two observations sharing one support, and
//! atoms are scored against the whole residual subspace after projecting out
//! the current support. With four smooth, wide-beam patterns the dictionary is
//! too coherent for plain OMP to resolve two paths, while the rank-aware
//! variant recovers them exactly from noiseless data.
//! [`SolverKind::RefinedOrmp`] starts from the rank-aware support and then
//! swaps single atoms while that lowers the residual, a local search towards
//! the least-squares-optimal support that matters once measurements are noisy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{csi_from_aod, AntennaPattern, AodProfile, ModeSet};
use crate::error::{invalid, Result};
use crate::phy::{Cx, SampleFrame};

/// Default bound on precoder magnitude.
pub const DEFAULT_POWER_CLAMP: f64 = 10.0;

/// Sensing matrix: one row of pattern gains per training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    mode_ids: Vec<usize>,
    atoms: DMatrix<Cx>,
}

impl Dictionary {
    pub fn from_modes(modes: &ModeSet, mode_ids: &[usize]) -> Result<Self> {
        if mode_ids.is_empty() {
            return invalid("dictionary needs at least one mode");
        }
        let n_bins = modes.n_bins();
        let mut seen = vec![false; modes.len()];
        for &m in mode_ids {
            if m >= modes.len() {
                return invalid(format!("mode {m} not in a set of {}", modes.len()));
            }
            if std::mem::replace(&mut seen[m], true) {
                return invalid(format!("mode {m} listed twice"));
            }
        }
        let atoms = DMatrix::from_fn(mode_ids.len(), n_bins, |r, c| modes.pattern(mode_ids[r]).gain[c]);
        Ok(Self {
            mode_ids: mode_ids.to_vec(),
            atoms,
        })
    }

    pub fn mode_ids(&self) -> &[usize] {
        &self.mode_ids
    }

    pub fn n_bins(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atoms(&self) -> &DMatrix<Cx> {
        &self.atoms
    }

    fn row_of(&self, mode_id: usize) -> Option<usize> {
        self.mode_ids.iter().position(|&m| m == mode_id)
    }
}

/// CSI values fed back from the training phase, keyed by mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiMeasurementSet {
    entries: Vec<(usize, Cx)>,
}

impl CsiMeasurementSet {
    pub fn new(entries: Vec<(usize, Cx)>) -> Result<Self> {
        if entries.is_empty() {
            return invalid("measurement set is empty");
        }
        for (i, (m, h)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == m) {
                return invalid(format!("mode {m} measured twice"));
            }
            if !h.re.is_finite() || !h.im.is_finite() {
                return invalid(format!("non-finite CSI for mode {m}"));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, Cx)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Omp,
    RankAwareOrmp,
    /// Rank-aware selection followed by single-atom swaps while the
    /// residual keeps shrinking.
    #[default]
    RefinedOrmp,
}

/// Recovered profile plus solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AodEstimate {
    pub profile: AodProfile,
    /// Selected bins in selection order.
    pub support: Vec<usize>,
    /// Residual norm before the first and after every iteration.
    pub residual_norms: Vec<f64>,
    /// Set when a support solve fell back to the minimum-norm solution.
    pub rank_deficient: bool,
}

/// Least squares with a minimum-norm fallback. Returns the solution and
/// whether the system was rank deficient.
pub fn least_squares(a: &DMatrix<Cx>, y: &DVector<Cx>) -> (DVector<Cx>, bool) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * 1e-10 * a.nrows().max(a.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let x = svd.solve(y, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()));
    (x, rank < a.ncols())
}

/// Orthonormal basis for the column space of `m`.
fn column_basis(m: &DMatrix<Cx>) -> DMatrix<Cx> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > smax * 1e-10)
        .map(|(i, _)| i)
        .collect();
    u.select_columns(&keep)
}

fn is_real(m: &DMatrix<Cx>) -> bool {
    m.iter().all(|z| z.im == 0.0)
}

/// Picks the next atom by plain correlation `|a^H r| / ||a||`.
fn omp_pick(a: &DMatrix<Cx>, residual: &DVector<Cx>, support: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for k in 0..a.ncols() {
        if support.contains(&k) {
            continue;
        }
        let col = a.column(k);
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let score = col.dotc(residual).norm() / norm;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}

/// Picks the next atom by its alignment with the residual subspace after
/// projecting out the current support.
fn ra_ormp_pick(a: &DMatrix<Cx>, residual: &DVector<Cx>, support: &[usize], real_dict: bool) -> Option<usize> {
    let rows = a.nrows();
    let obs = if real_dict {
        DMatrix::from_fn(rows, 2, |r, c| {
            let z = residual[r];
            Cx::new(if c == 0 { z.re } else { z.im }, 0.0)
        })
    } else {
        DMatrix::from_column_slice(rows, 1, residual.as_slice())
    };
    let subspace = column_basis(&obs);
    if subspace.ncols() == 0 {
        return None;
    }
    let projector = if support.is_empty() {
        DMatrix::identity(rows, rows)
    } else {
        let q = column_basis(&a.select_columns(support));
        DMatrix::identity(rows, rows) - &q * q.adjoint()
    };
    let projected = &projector * a;
    let mut best: Option<(usize, f64)> = None;
    for k in 0..a.ncols() {
        if support.contains(&k) {
            continue;
        }
        let col = projected.column(k);
        let norm = col.norm();
        if norm <= 1e-12 * a.column(k).norm() || norm == 0.0 {
            continue;
        }
        let score = (subspace.adjoint() * col).norm() / norm;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}

fn projector_off(a: &DMatrix<Cx>, cols: &[usize]) -> DMatrix<Cx> {
    let rows = a.nrows();
    if cols.is_empty() {
        return DMatrix::identity(rows, rows);
    }
    let q = column_basis(&a.select_columns(cols));
    DMatrix::identity(rows, rows) - &q * q.adjoint()
}

/// Replaces one support atom at a time by the atom that lowers the residual
/// most; stops when no swap improves it by more than a relative 1e-9.
fn refine_support(a: &DMatrix<Cx>, y: &DVector<Cx>, support: &mut [usize]) {
    const MAX_SWEEPS: usize = 32;
    let residual_sq = |support: &[usize]| (projector_off(a, support) * y).norm_squared();
    let mut current = residual_sq(support);
    for _ in 0..MAX_SWEEPS {
        let mut best: Option<(usize, usize, f64)> = None;
        for pos in 0..support.len() {
            let others: Vec<usize> = support
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != pos)
                .map(|(_, &k)| k)
                .collect();
            let proj = projector_off(a, &others);
            let r = &proj * y;
            let base = r.norm_squared();
            let projected = &proj * a;
            for k in 0..a.ncols() {
                if support.contains(&k) {
                    continue;
                }
                let col = projected.column(k);
                let n2 = col.norm_squared();
                if n2 <= 1e-24 * a.column(k).norm_squared() || n2 == 0.0 {
                    continue;
                }
                let value = base - col.dotc(&r).norm_sqr() / n2;
                if best.is_none_or(|(_, _, v)| value < v) {
                    best = Some((pos, k, value));
                }
            }
        }
        match best {
            Some((pos, k, value)) if value < current * (1.0 - 1e-9) => {
                support[pos] = k;
                current = value;
            }
            _ => break,
        }
    }
}

/// Greedy sparse recovery of the AoD profile behind `meas`.
///
/// Stops after `sparsity` atoms or once the residual norm drops to
/// `residual_tol` times the measurement norm. Ties between equally scored
/// atoms go to the lowest bin.
pub fn estimate_aod(
    meas: &CsiMeasurementSet,
    dict: &Dictionary,
    solver: SolverKind,
    sparsity: usize,
    residual_tol: f64,
) -> Result<AodEstimate> {
    if meas.is_empty() {
        return invalid("no CSI measurements");
    }
    if sparsity == 0 || sparsity > meas.len() {
        return invalid(format!(
            "sparsity {sparsity} must lie in 1..={} (the number of measurements)",
            meas.len()
        ));
    }
    if !(residual_tol >= 0.0) {
        return invalid("residual tolerance must be non-negative");
    }
    let rows: Vec<usize> = meas
        .entries()
        .iter()
        .map(|(m, _)| {
            dict.row_of(*m)
                .ok_or_else(|| crate::Error::InvalidInput(format!("mode {m} has no dictionary row")))
        })
        .collect::<Result<_>>()?;
    let a = dict.atoms.select_rows(&rows);
    let y = DVector::from_iterator(meas.len(), meas.entries().iter().map(|(_, h)| *h));
    let real_dict = is_real(&a);

    let y_norm = y.norm();
    let mut support: Vec<usize> = Vec::new();
    let mut coeffs = DVector::<Cx>::zeros(0);
    let mut residual = y.clone();
    let mut residual_norms = vec![y_norm];
    let mut rank_deficient = false;

    while support.len() < sparsity && residual.norm() > residual_tol * y_norm {
        let pick = match solver {
            SolverKind::Omp => omp_pick(&a, &residual, &support),
            SolverKind::RankAwareOrmp | SolverKind::RefinedOrmp => ra_ormp_pick(&a, &residual, &support, real_dict),
        };
        let Some(k) = pick else { break };
        support.push(k);
        let sub = a.select_columns(&support);
        let (x, deficient) = least_squares(&sub, &y);
        rank_deficient |= deficient;
        residual = &y - &sub * &x;
        coeffs = x;
        residual_norms.push(residual.norm());
    }

    if solver == SolverKind::RefinedOrmp && !support.is_empty() {
        let before = support.clone();
        refine_support(&a, &y, &mut support);
        if support != before {
            let sub = a.select_columns(&support);
            let (x, deficient) = least_squares(&sub, &y);
            rank_deficient |= deficient;
            residual_norms.push((&y - &sub * &x).norm());
            coeffs = x;
        }
    }

    let mut profile = AodProfile::empty(dict.n_bins());
    for (&bin, &g) in support.iter().zip(coeffs.iter()) {
        profile.set(bin, g)?;
    }
    Ok(AodEstimate {
        profile,
        support,
        residual_norms,
        rank_deficient,
    })
}

/// CSI of `pattern` under an estimated profile; same convention as
/// [`csi_from_aod`].
pub fn predict_csi(profile: &AodProfile, pattern: &AntennaPattern) -> Result<Cx> {
    csi_from_aod(profile, pattern)
}

/// Predicted CSI for every mode, indexed by `mode_id`.
pub fn predict_all(profile: &AodProfile, modes: &ModeSet) -> Result<Vec<Cx>> {
    modes.patterns().iter().map(|p| predict_csi(profile, p)).collect()
}

/// Zero-forcing weights per mode, indexed by `mode_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precoder {
    pub weights: Vec<Cx>,
    /// Modes whose weight hit the clamp (or whose prediction was zero).
    pub unusable: Vec<bool>,
    pub power_clamp: f64,
}

impl Precoder {
    /// Unit weights on every mode.
    pub fn identity(n_modes: usize) -> Self {
        Self {
            weights: vec![Cx::new(1.0, 0.0); n_modes],
            unusable: vec![false; n_modes],
            power_clamp: DEFAULT_POWER_CLAMP,
        }
    }

    pub fn weight(&self, mode_id: usize) -> Cx {
        self.weights[mode_id]
    }

    pub fn is_usable(&self, mode_id: usize) -> bool {
        !self.unusable[mode_id]
    }
}

/// `w(m) = 1 / h(m)`, scaled back onto the clamp circle when `|w|` would
/// exceed `power_clamp`. A zero prediction gets `power_clamp + 0j`.
pub fn compute_precoder(predicted: &[Cx], power_clamp: f64) -> Result<Precoder> {
    if predicted.is_empty() {
        return invalid("precoder needs at least one mode");
    }
    if !(power_clamp > 0.0) {
        return invalid(format!("power clamp must be positive, got {power_clamp}"));
    }
    let mut weights = Vec::with_capacity(predicted.len());
    let mut unusable = Vec::with_capacity(predicted.len());
    for &h in predicted {
        if h == Cx::new(0.0, 0.0) {
            weights.push(Cx::new(power_clamp, 0.0));
            unusable.push(true);
            continue;
        }
        let w = h.inv();
        if w.norm() > power_clamp {
            weights.push(w * (power_clamp / w.norm()));
            unusable.push(true);
        } else {
            weights.push(w);
            unusable.push(false);
        }
    }
    Ok(Precoder {
        weights,
        unusable,
        power_clamp,
    })
}

pub fn apply_precoder(frame: &SampleFrame, w: Cx) -> SampleFrame {
    SampleFrame::new(frame.samples.iter().map(|s| s * w).collect())
}

/// Diagnostic JSON: recovered profile plus predicted (and, when known, true)
/// CSI per mode.
pub fn prediction_report(
    estimate: &AodEstimate,
    modes: &ModeSet,
    truth: Option<&AodProfile>,
) -> Result<serde_json::Value> {
    let mut per_mode = Vec::with_capacity(modes.len());
    for p in modes.patterns() {
        let predicted = predict_csi(&estimate.profile, p)?;
        let mut row = serde_json::json!({
            "mode_id": p.mode_id,
            "predicted": [predicted.re, predicted.im],
        });
        if let Some(t) = truth {
            let h = csi_from_aod(t, p)?;
            row["true"] = serde_json::json!([h.re, h.im]);
        }
        per_mode.push(row);
    }
    Ok(serde_json::json!({
        "support": estimate.support,
        "residual_norms": estimate.residual_norms,
        "rank_deficient": estimate.rank_deficient,
        "profile": estimate.profile.to_json_array(),
        "modes": per_mode,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{lpda_pattern, make_mode_set, propagate, sample_multipath_profile, LpdaShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn modes() -> ModeSet {
        make_mode_set(&lpda_pattern(60.0, 0.0, 360).unwrap(), 5).unwrap()
    }

    fn measure(profile: &AodProfile, modes: &ModeSet, ids: &[usize]) -> CsiMeasurementSet {
        CsiMeasurementSet::new(
            ids.iter()
                .map(|&m| (m, csi_from_aod(profile, modes.pattern(m)).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_sparse_matches_single_bin_scan() {
        let modes = modes();
        let dict = Dictionary::from_modes(&modes, &[0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let truth = sample_multipath_profile(&mut rng, 360, 1, 60.0, 0.6).unwrap();
            let meas = measure(&truth, &modes, &[0, 1, 2, 3]);

            // Oracle: best single-bin least-squares fit over every bin.
            let y: Vec<Cx> = meas.entries().iter().map(|(_, h)| *h).collect();
            let mut best = (usize::MAX, f64::INFINITY, Cx::default());
            for bin in 0..360 {
                let col: Vec<Cx> = (0..4).map(|m| modes.pattern(m).gain[bin]).collect();
                let denom: f64 = col.iter().map(|c| c.norm_sqr()).sum();
                let g: Cx = col.iter().zip(&y).map(|(c, v)| c.conj() * v).sum::<Cx>() / denom;
                let r: f64 = col.iter().zip(&y).map(|(c, v)| (v - c * g).norm_sqr()).sum();
                if r < best.1 {
                    best = (bin, r, g);
                }
            }

            for solver in [SolverKind::Omp, SolverKind::RankAwareOrmp] {
                let est = estimate_aod(&meas, &dict, solver, 1, 1e-6).unwrap();
                assert_eq!(est.support, vec![best.0], "{solver:?}");
                let (bin, g) = truth.paths().next().unwrap();
                assert_eq!(bin, best.0);
                assert!((est.profile.gain(bin) - g).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_measurements_select_nothing() {
        let modes = modes();
        let dict = Dictionary::from_modes(&modes, &[0, 1, 2, 3]).unwrap();
        let meas = CsiMeasurementSet::new((0..4).map(|m| (m, Cx::default())).collect()).unwrap();
        for solver in [SolverKind::Omp, SolverKind::RankAwareOrmp] {
            let est = estimate_aod(&meas, &dict, solver, 4, 1e-6).unwrap();
            assert!(est.profile.is_empty());
            assert!(est.support.is_empty());
        }
    }

    #[test]
    fn input_validation() {
        let modes = modes();
        let dict = Dictionary::from_modes(&modes, &[0, 1]).unwrap();
        assert!(CsiMeasurementSet::new(vec![]).is_err());
        assert!(CsiMeasurementSet::new(vec![(0, Cx::default()), (0, Cx::default())]).is_err());
        let meas = CsiMeasurementSet::new(vec![(0, Cx::new(1.0, 0.0)), (1, Cx::new(0.5, 0.0))]).unwrap();
        assert!(estimate_aod(&meas, &dict, SolverKind::Omp, 3, 1e-6).is_err());
        assert!(estimate_aod(&meas, &dict, SolverKind::Omp, 0, 1e-6).is_err());
        let foreign = CsiMeasurementSet::new(vec![(4, Cx::new(1.0, 0.0))]).unwrap();
        assert!(estimate_aod(&foreign, &dict, SolverKind::Omp, 1, 1e-6).is_err());
        assert!(Dictionary::from_modes(&modes, &[0, 0]).is_err());
        assert!(Dictionary::from_modes(&modes, &[7]).is_err());
    }

    #[test]
    fn residuals_never_increase() {
        let modes = modes();
        let dict = Dictionary::from_modes(&modes, &[0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n_paths in 1..=3 {
            for _ in 0..40 {
                let truth = sample_multipath_profile(&mut rng, 360, n_paths, 60.0, 0.6).unwrap();
                let meas = measure(&truth, &modes, &[0, 1, 2, 3]);
                for solver in [SolverKind::Omp, SolverKind::RankAwareOrmp] {
                    let est = estimate_aod(&meas, &dict, solver, 4, 0.0).unwrap();
                    for w in est.residual_norms.windows(2) {
                        assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{:?}", est.residual_norms);
                    }
                }
            }
        }
    }

    #[test]
    fn two_path_recovery_predicts_held_out_mode() {
        let modes = modes();
        let dict = Dictionary::from_modes(&modes, &[0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let truth = sample_multipath_profile(&mut rng, 360, 2, 60.0, 0.6).unwrap();
            let meas = measure(&truth, &modes, &[0, 1, 2, 3]);
            let est = estimate_aod(&meas, &dict, SolverKind::RankAwareOrmp, 4, 1e-6).unwrap();
            // Training modes are reproduced within the residual tolerance.
            for &(m, h) in meas.entries() {
                let p = predict_csi(&est.profile, modes.pattern(m)).unwrap();
                assert!((p - h).norm() <= 1e-6 * 2.0 + 1e-12);
            }
            let h4 = csi_from_aod(&truth, modes.pattern(4)).unwrap();
            let p4 = predict_csi(&est.profile, modes.pattern(4)).unwrap();
            assert!((p4 - h4).norm() / h4.norm() < 1e-6);
        }
    }

    #[test]
    fn prediction_uses_channel_convention() {
        let modes = modes();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let truth = sample_multipath_profile(&mut rng, 360, 3, 60.0, 0.6).unwrap();
        for p in modes.patterns() {
            assert!((predict_csi(&truth, p).unwrap() - csi_from_aod(&truth, p).unwrap()).norm() < 1e-12);
        }
        assert_eq!(
            predict_csi(&AodProfile::empty(360), modes.pattern(0)).unwrap(),
            Cx::default()
        );
        assert!(predict_csi(&AodProfile::empty(72), modes.pattern(0)).is_err());
    }

    #[test]
    fn least_squares_flags_rank_deficiency() {
        let a = DMatrix::from_row_slice(
            3,
            2,
            &[
                Cx::new(1.0, 0.0),
                Cx::new(2.0, 0.0),
                Cx::new(1.0, 0.0),
                Cx::new(2.0, 0.0),
                Cx::new(1.0, 0.0),
                Cx::new(2.0, 0.0),
            ],
        );
        let y = DVector::from_element(3, Cx::new(5.0, 0.0));
        let (x, deficient) = least_squares(&a, &y);
        assert!(deficient);
        // Minimum-norm solution of x1 + 2 x2 = 5 is (1, 2).
        assert!((x[0] - Cx::new(1.0, 0.0)).norm() < 1e-9);
        assert!((x[1] - Cx::new(2.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn precoder_examples() {
        let p = compute_precoder(&[Cx::new(1.0, 0.0)], 10.0).unwrap();
        assert_eq!(p.weights[0], Cx::new(1.0, 0.0));
        assert!(p.is_usable(0));

        let p = compute_precoder(&[Cx::new(0.0, 2.0)], 10.0).unwrap();
        assert!((p.weights[0] - Cx::new(0.0, -0.5)).norm() < 1e-15);
        assert!((Cx::new(0.0, 2.0) * p.weights[0] - Cx::new(1.0, 0.0)).norm() < 1e-15);

        let h = Cx::from_polar(0.01, 0.7);
        let p = compute_precoder(&[h], 10.0).unwrap();
        assert!((p.weights[0].norm() - 10.0).abs() < 1e-12);
        assert!(((h * p.weights[0]).norm() - 0.1).abs() < 1e-12);
        assert!((h * p.weights[0]).arg().abs() < 1e-12);
        assert!(!p.is_usable(0));

        let p = compute_precoder(&[Cx::default()], 10.0).unwrap();
        assert_eq!(p.weights[0], Cx::new(10.0, 0.0));
        assert!(!p.is_usable(0));

        assert!(compute_precoder(&[], 10.0).is_err());
    }

    #[test]
    fn precoder_cancels_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = SampleFrame::new((0..80).map(|i| Cx::new(i as f64 * 0.1, 1.0)).collect());
        assert_eq!(apply_precoder(&x, Cx::new(1.0, 0.0)), x);
        let doubled = apply_precoder(&x, Cx::new(2.0, 0.0));
        assert!(doubled.samples.iter().zip(&x.samples).all(|(a, b)| *a == b * 2.0));

        let h = Cx::new(0.3, -0.8);
        let y = propagate(&apply_precoder(&x, h.inv()), h, None, Cx::default(), 0.0, &mut rng).unwrap();
        for (a, b) in y.samples.iter().zip(&x.samples) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn exact_recovery_makes_bob_channel_mode_independent() {
        let modes = modes();
        let dict = Dictionary::from_modes(&modes, &[0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let truth = sample_multipath_profile(&mut rng, 360, 2, 60.0, 0.6).unwrap();
            let est = estimate_aod(
                &measure(&truth, &modes, &[0, 1, 2, 3]),
                &dict,
                SolverKind::RankAwareOrmp,
                4,
                1e-6,
            )
            .unwrap();
            let pre = compute_precoder(&predict_all(&est.profile, &modes).unwrap(), 10.0).unwrap();
            for m in 0..5 {
                if pre.is_usable(m) {
                    let h = csi_from_aod(&truth, modes.pattern(m)).unwrap();
                    assert!((h * pre.weight(m) - Cx::new(1.0, 0.0)).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn eve_channel_still_varies_under_bob_precoding() {
        let modes = modes();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut varied = 0;
        for _ in 0..1000 {
            let bob = sample_multipath_profile(&mut rng, 360, 2, 60.0, 0.6).unwrap();
            let eve = sample_multipath_profile(&mut rng, 360, 2, 60.0, 0.6).unwrap();
            let pre = compute_precoder(&predict_all(&bob, &modes).unwrap(), 10.0).unwrap();
            let eff: Vec<f64> = (0..5)
                .map(|m| (csi_from_aod(&eve, modes.pattern(m)).unwrap() * pre.weight(m)).norm())
                .collect();
            let mean = eff.iter().sum::<f64>() / 5.0;
            let sd = (eff.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
            if sd > 0.1 * mean {
                varied += 1;
            }
        }
        assert!(varied >= 950, "{varied}");
    }

    #[test]
    fn complex_dictionary_falls_back_to_single_observation() {
        let shape = LpdaShape {
            phase_slope: 0.02,
            ..LpdaShape::default()
        };
        let modes = ModeSet::from_shape(&shape, 5, 360).unwrap();
        let dict = Dictionary::from_modes(&modes, &[0, 1, 2, 3]).unwrap();
        let truth = AodProfile::from_paths(360, [(100, Cx::new(0.6, 0.8))]).unwrap();
        let est = estimate_aod(
            &measure(&truth, &modes, &[0, 1, 2, 3]),
            &dict,
            SolverKind::RankAwareOrmp,
            1,
            1e-9,
        )
        .unwrap();
        assert_eq!(est.support, vec![100]);
    }

    #[test]
    fn report_has_every_mode() {
        let modes = modes();
        let dict = Dictionary::from_modes(&modes, &[0, 1, 2, 3]).unwrap();
        let truth = AodProfile::from_paths(360, [(30, Cx::new(1.0, 0.0))]).unwrap();
        let est = estimate_aod(
            &measure(&truth, &modes, &[0, 1, 2, 3]),
            &dict,
            SolverKind::default(),
            4,
            1e-6,
        )
        .unwrap();
        let report = prediction_report(&est, &modes, Some(&truth)).unwrap();
        assert_eq!(report["modes"].as_array().unwrap().len(), 5);
        assert!(report["modes"][4]["true"].is_array());
    }
}
