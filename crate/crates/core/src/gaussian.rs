//! Multimode Gaussian states in the `q = a + a†` convention (vacuum covariance `I`).
//!
//! Modes are addressed by label; operations never reorder silently.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{domain, Error, Result};

/// Block-diagonal symplectic form `Ω_n` built from `ω = [[0, 1], [-1, 0]]`.
pub fn symplectic_form(n: usize) -> DMatrix<f64> {
    let mut omega = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        omega[(2 * k, 2 * k + 1)] = 1.0;
        omega[(2 * k + 1, 2 * k)] = -1.0;
    }
    omega
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    cov: DMatrix<f64>,
    disp: DVector<f64>,
    labels: Vec<String>,
}

/// A symplectic matrix acting on a fixed mode ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticMap {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
}

fn owned(labels: &[&str]) -> Vec<String> {
    labels.iter().map(|s| s.to_string()).collect()
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) || x.is_nan() {
        return Err(domain(format!("{name} = {x} is outside [0, 1]")));
    }
    Ok(())
}

impl SymplecticMap {
    pub fn identity(labels: &[&str]) -> Self {
        SymplecticMap {
            matrix: DMatrix::identity(2 * labels.len(), 2 * labels.len()),
            labels: owned(labels),
        }
    }

    /// Beamsplitter of transmissivity `eta` on modes `(first, second)`:
    /// `[[√η I, √(1-η) I], [-√(1-η) I, √η I]]` on the pair, identity elsewhere.
    pub fn beamsplitter(eta: f64, labels: &[&str], first: &str, second: &str) -> Result<Self> {
        check_unit("transmissivity", eta)?;
        let mut map = Self::identity(labels);
        let i = position(&map.labels, first)?;
        let j = position(&map.labels, second)?;
        if i == j {
            return Err(Error::Structural(
                "beamsplitter needs two distinct modes".into(),
            ));
        }
        let (t, r) = (eta.sqrt(), (1.0 - eta).sqrt());
        for q in 0..2 {
            let (a, b) = (2 * i + q, 2 * j + q);
            map.matrix[(a, a)] = t;
            map.matrix[(a, b)] = r;
            map.matrix[(b, a)] = -r;
            map.matrix[(b, b)] = t;
        }
        Ok(map)
    }

    /// `max |S Ω Sᵀ - Ω|`.
    pub fn symplectic_defect(&self) -> f64 {
        let omega = symplectic_form(self.labels.len());
        (&self.matrix * &omega * self.matrix.transpose() - omega).amax()
    }

    pub fn compose(&self, first: &SymplecticMap) -> Result<SymplecticMap> {
        if self.labels != first.labels {
            return Err(Error::Structural(
                "cannot compose maps on different modes".into(),
            ));
        }
        Ok(SymplecticMap {
            matrix: &self.matrix * &first.matrix,
            labels: self.labels.clone(),
        })
    }
}

fn position(labels: &[String], mode: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == mode)
        .ok_or_else(|| Error::Structural(format!("unknown mode {mode:?}")))
}

/// `ln det` and solver for a symmetric positive-definite matrix.
fn spd_factor(
    m: &DMatrix<f64>,
    what: &str,
) -> Result<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

impl GaussianState {
    pub fn new(cov: DMatrix<f64>, disp: DVector<f64>, labels: &[&str]) -> Result<Self> {
        let n = labels.len();
        if cov.shape() != (2 * n, 2 * n) || disp.len() != 2 * n {
            return Err(Error::Structural(format!(
                "{n} modes need a {0}x{0} covariance and a length-{0} displacement",
                2 * n
            )));
        }
        let mut uniq = owned(labels);
        uniq.sort();
        uniq.dedup();
        if uniq.len() != n {
            return Err(Error::Structural("duplicate mode labels".into()));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 {
            return Err(Error::Structural("covariance is not symmetric".into()));
        }
        Ok(GaussianState {
            cov,
            disp,
            labels: owned(labels),
        })
    }

    pub fn vacuum(labels: &[&str]) -> Self {
        let n = labels.len();
        GaussianState {
            cov: DMatrix::identity(2 * n, 2 * n),
            disp: DVector::zeros(2 * n),
            labels: owned(labels),
        }
    }

    /// Thermal state with mean photon number `nbar`.
    pub fn thermal(nbar: f64, label: &str) -> Result<Self> {
        if nbar < 0.0 || nbar.is_nan() {
            return Err(domain(format!("mean photon number {nbar} is negative")));
        }
        Ok(GaussianState {
            cov: DMatrix::identity(2, 2) * (1.0 + 2.0 * nbar),
            disp: DVector::zeros(2),
            labels: vec![label.to_string()],
        })
    }

    pub fn num_modes(&self) -> usize {
        self.labels.len()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn disp(&self) -> &DVector<f64> {
        &self.disp
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Smallest eigenvalue of the Hermitian matrix `Γ + iΩ`; physical states give `≥ 0`.
    pub fn physicality_margin(&self) -> f64 {
        let n = self.num_modes();
        let omega = symplectic_form(n);
        let h = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
            Complex::new(self.cov[(i, j)], omega[(i, j)])
        });
        h.symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn is_physical(&self) -> bool {
        self.physicality_margin() >= -1e-9
    }

    /// Tensor product, `self` first.
    pub fn tensor(&self, other: &GaussianState) -> Result<GaussianState> {
        let (n1, n2) = (2 * self.num_modes(), 2 * other.num_modes());
        let mut cov = DMatrix::zeros(n1 + n2, n1 + n2);
        cov.view_mut((0, 0), (n1, n1)).copy_from(&self.cov);
        cov.view_mut((n1, n1), (n2, n2)).copy_from(&other.cov);
        let mut disp = DVector::zeros(n1 + n2);
        disp.rows_mut(0, n1).copy_from(&self.disp);
        disp.rows_mut(n1, n2).copy_from(&other.disp);
        let labels: Vec<&str> = self
            .labels
            .iter()
            .chain(&other.labels)
            .map(String::as_str)
            .collect();
        GaussianState::new(cov, disp, &labels)
    }

    pub fn apply_symplectic(&self, map: &SymplecticMap) -> Result<GaussianState> {
        if map.labels != self.labels {
            return Err(Error::Structural(format!(
                "map acts on {:?} but state has {:?}",
                map.labels, self.labels
            )));
        }
        let cov = &map.matrix * &self.cov * map.matrix.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianState {
            cov,
            disp: &map.matrix * &self.disp,
            labels: self.labels.clone(),
        })
    }

    /// Applies a beamsplitter on two of the state's modes.
    pub fn beamsplitter(&self, eta: f64, first: &str, second: &str) -> Result<GaussianState> {
        let labels: Vec<&str> = self.labels.iter().map(String::as_str).collect();
        self.apply_symplectic(&SymplecticMap::beamsplitter(eta, &labels, first, second)?)
    }

    /// Pure loss: mixes `mode` with a fresh vacuum environment and discards it.
    pub fn attenuate(&self, mode: &str, eta: f64) -> Result<GaussianState> {
        const ENV: &str = "\u{0}env";
        let env = GaussianState::vacuum(&[ENV]);
        let keep: Vec<&str> = self.labels.iter().map(String::as_str).collect();
        self.tensor(&env)?
            .beamsplitter(eta, mode, ENV)?
            .partial_trace(&keep)
    }

    /// Displaces the listed modes; each amplitude adds `2(Re α, Im α)`.
    pub fn displace(&self, amplitudes: &[(&str, Complex<f64>)]) -> Result<GaussianState> {
        let mut out = self.clone();
        for &(mode, alpha) in amplitudes {
            if !alpha.re.is_finite() || !alpha.im.is_finite() {
                return Err(domain("displacement amplitude is not finite"));
            }
            let i = position(&self.labels, mode)?;
            out.disp[2 * i] += 2.0 * alpha.re;
            out.disp[2 * i + 1] += 2.0 * alpha.im;
        }
        Ok(out)
    }

    /// Keeps the listed modes, in the order given.
    pub fn partial_trace(&self, keep: &[&str]) -> Result<GaussianState> {
        if keep.is_empty() {
            return Err(Error::Structural(
                "partial trace must keep at least one mode".into(),
            ));
        }
        let idx = self.indices(keep)?;
        let (cov, disp) = self.select(&idx);
        GaussianState::new(cov, disp, keep)
    }

    fn indices(&self, modes: &[&str]) -> Result<Vec<usize>> {
        modes.iter().map(|m| position(&self.labels, m)).collect()
    }

    fn select(&self, modes: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let q: Vec<usize> = modes.iter().flat_map(|&m| [2 * m, 2 * m + 1]).collect();
        let cov = DMatrix::from_fn(q.len(), q.len(), |i, j| self.cov[(q[i], q[j])]);
        let disp = DVector::from_fn(q.len(), |i, _| self.disp[q[i]]);
        (cov, disp)
    }

    fn cross(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let r: Vec<usize> = rows.iter().flat_map(|&m| [2 * m, 2 * m + 1]).collect();
        let c: Vec<usize> = cols.iter().flat_map(|&m| [2 * m, 2 * m + 1]).collect();
        DMatrix::from_fn(r.len(), c.len(), |i, j| self.cov[(r[i], c[j])])
    }

    /// Conditions on the vacuum outcome of a heterodyne-like projection on one mode.
    pub fn condition_on_vacuum(&self, mode: &str) -> Result<GaussianState> {
        self.condition_on_vacuum_all(&[mode])
    }

    /// Joint vacuum conditioning on several modes:
    /// `Γ' = Γ_rest - C (Γ_m + I)⁻¹ Cᵀ`, `d' = d_rest - C (Γ_m + I)⁻¹ d_m`.
    pub fn condition_on_vacuum_all(&self, modes: &[&str]) -> Result<GaussianState> {
        let measured = self.indices(modes)?;
        let rest: Vec<usize> = (0..self.num_modes())
            .filter(|i| !measured.contains(i))
            .collect();
        if rest.is_empty() {
            return Err(Error::Structural(
                "conditioning would leave no modes".into(),
            ));
        }
        let (gm, dm) = self.select(&measured);
        let (gr, dr) = self.select(&rest);
        let c = self.cross(&rest, &measured);
        let shifted = &gm + DMatrix::identity(gm.nrows(), gm.ncols());
        let chol = spd_factor(&shifted, "measured-mode covariance + I")?;
        let cov = &gr - &c * chol.solve(&c.transpose());
        let cov = (&cov + cov.transpose()) * 0.5;
        let disp = &dr - &c * chol.solve(&dm);
        let labels: Vec<&str> = rest.iter().map(|&i| self.labels[i].as_str()).collect();
        GaussianState::new(cov, disp, &labels)
    }

    /// `Tr[ρ |0…0⟩⟨0…0|]` on `modes`, including the displacement factor.
    pub fn vacuum_overlap(&self, modes: &[&str]) -> Result<f64> {
        if modes.is_empty() {
            return Ok(1.0);
        }
        let idx = self.indices(modes)?;
        let (g, d) = self.select(&idx);
        Ok(vacuum_overlap_raw(&g, &d)?.exp())
    }

    /// Same quantity as [`vacuum_overlap`](Self::vacuum_overlap), used for displaced
    /// decomposition components that share a covariance.
    pub fn gaussian_click_integral(&self, modes: &[&str]) -> Result<f64> {
        self.vacuum_overlap(modes)
    }
}

/// `ln` of `2^N / √det(Γ + I) · exp(-½ dᵀ (Γ + I)⁻¹ d)` computed from a Cholesky factor.
pub(crate) fn vacuum_overlap_raw(g: &DMatrix<f64>, d: &DVector<f64>) -> Result<f64> {
    let n = g.nrows() / 2;
    let shifted = g + DMatrix::identity(g.nrows(), g.ncols());
    let chol = spd_factor(&shifted, "covariance + I")?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let quad = d.dot(&chol.solve(d));
    Ok(n as f64 * std::f64::consts::LN_2 - 0.5 * log_det - 0.5 * quad)
}

/// Two-mode squeezed vacuum with `v = 1 + 2n̄`.
pub fn tmsv(nbar: f64, labels: [&str; 2]) -> Result<GaussianState> {
    if nbar < 0.0 || !nbar.is_finite() {
        return Err(domain(format!(
            "mean photon number {nbar} must be finite and nonnegative"
        )));
    }
    let v = 1.0 + 2.0 * nbar;
    let s = (v * v - 1.0).sqrt();
    let mut cov = DMatrix::identity(4, 4) * v;
    cov[(0, 2)] = s;
    cov[(2, 0)] = s;
    cov[(1, 3)] = -s;
    cov[(3, 1)] = -s;
    GaussianState::new(cov, DVector::zeros(4), &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tmsv_blocks() {
        let s = tmsv(1.0, ["A", "B"]).unwrap();
        assert_eq!(s.cov()[(0, 0)], 3.0);
        assert_abs_diff_eq!(s.cov()[(0, 2)], 8f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.cov()[(1, 3)], -8f64.sqrt(), epsilon = 1e-15);
        assert_eq!(
            tmsv(0.0, ["A", "B"]).unwrap().cov(),
            &DMatrix::identity(4, 4)
        );
        assert!(tmsv(-0.1, ["A", "B"]).is_err());
        let op = tmsv(0.015, ["A", "B"]).unwrap();
        assert_abs_diff_eq!(op.cov()[(0, 0)], 1.03, epsilon = 1e-15);
    }

    #[test]
    fn beamsplitter_forms() {
        let labels = ["a", "b"];
        let id = SymplecticMap::beamsplitter(1.0, &labels, "a", "b").unwrap();
        assert_eq!(id.matrix, DMatrix::identity(4, 4));
        let half = SymplecticMap::beamsplitter(0.5, &labels, "a", "b").unwrap();
        let h = 0.5f64.sqrt();
        assert_abs_diff_eq!(half.matrix[(0, 2)], h, epsilon = 1e-15);
        assert_abs_diff_eq!(half.matrix[(2, 0)], -h, epsilon = 1e-15);
        assert!(half.symplectic_defect() < 1e-12);
        assert!(SymplecticMap::beamsplitter(1.2, &labels, "a", "b").is_err());
        let vac = GaussianState::vacuum(&labels)
            .beamsplitter(0.25, "a", "b")
            .unwrap();
        assert_abs_diff_eq!(vac.cov(), &DMatrix::identity(4, 4), epsilon = 1e-14);
    }

    #[test]
    fn beamsplitters_compose() {
        let labels = ["a", "b"];
        let s1 = SymplecticMap::beamsplitter(0.3, &labels, "a", "b").unwrap();
        let s2 = SymplecticMap::beamsplitter(0.6, &labels, "a", "b").unwrap();
        let st = tmsv(0.4, ["a", "b"]).unwrap();
        let seq = st
            .apply_symplectic(&s1)
            .unwrap()
            .apply_symplectic(&s2)
            .unwrap();
        let once = st.apply_symplectic(&s2.compose(&s1).unwrap()).unwrap();
        assert_abs_diff_eq!(seq.cov(), once.cov(), epsilon = 1e-13);
    }

    #[test]
    fn loss_on_tmsv_mode() {
        let eta = 0.7;
        let st = tmsv(0.5, ["A", "B"]).unwrap().attenuate("A", eta).unwrap();
        let v = 2.0;
        assert_abs_diff_eq!(st.cov()[(0, 0)], v * eta + 1.0 - eta, epsilon = 1e-14);
        assert!(st.is_physical());
    }

    #[test]
    fn displacement_convention() {
        let vac = GaussianState::vacuum(&["A"]);
        let d = vac.displace(&[("A", Complex::new(1.0, 0.0))]).unwrap();
        assert_eq!(d.disp().as_slice(), &[2.0, 0.0]);
        let d = vac.displace(&[("A", Complex::new(0.0, 0.5))]).unwrap();
        assert_eq!(d.disp().as_slice(), &[0.0, 1.0]);
        let d = vac.displace(&[("A", Complex::new(1.0, 1.0))]).unwrap();
        assert_abs_diff_eq!(
            d.vacuum_overlap(&["A"]).unwrap(),
            (-2f64).exp(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn traces_and_overlaps() {
        let st = tmsv(1.0, ["A", "B"]).unwrap();
        let a = st.partial_trace(&["A"]).unwrap();
        assert_abs_diff_eq!(a.cov(), &(DMatrix::identity(2, 2) * 3.0), epsilon = 1e-15);
        assert_abs_diff_eq!(a.vacuum_overlap(&["A"]).unwrap(), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(
            st.vacuum_overlap(&["A", "B"]).unwrap(),
            0.5,
            epsilon = 1e-14
        );
        assert_eq!(st.vacuum_overlap(&[]).unwrap(), 1.0);
        assert!(st.partial_trace(&["C"]).is_err());
        let swapped = st.partial_trace(&["B", "A"]).unwrap();
        assert_eq!(swapped.labels(), &["B".to_string(), "A".to_string()]);
    }

    #[test]
    fn vacuum_conditioning() {
        let st = tmsv(0.3, ["A", "B"]).unwrap();
        let c = st.condition_on_vacuum("B").unwrap();
        assert_abs_diff_eq!(c.cov(), &DMatrix::identity(2, 2), epsilon = 1e-12);
        let product = GaussianState::thermal(0.2, "X")
            .unwrap()
            .tensor(&GaussianState::thermal(0.7, "Y").unwrap())
            .unwrap();
        let c = product.condition_on_vacuum("Y").unwrap();
        assert_abs_diff_eq!(c.cov()[(0, 0)], 1.4, epsilon = 1e-14);
    }

    #[test]
    fn omega_sandwich_is_redundant() {
        let omega = symplectic_form(2);
        let st = tmsv(0.8, ["A", "B"])
            .unwrap()
            .displace(&[
                ("A", Complex::new(0.3, -0.2)),
                ("B", Complex::new(-0.5, 0.1)),
            ])
            .unwrap();
        let m = st.cov() + DMatrix::identity(4, 4);
        let sandwiched = &omega * &m * omega.transpose();
        assert_abs_diff_eq!(sandwiched.determinant(), m.determinant(), epsilon = 1e-10);
        let od = &omega * st.disp();
        let q1 = od.dot(&(sandwiched.clone().try_inverse().unwrap() * &od));
        let q2 = st.disp().dot(&(m.try_inverse().unwrap() * st.disp()));
        assert_abs_diff_eq!(q1, q2, epsilon = 1e-10);
    }

    #[test]
    fn physicality_check_rejects_squeezed_below_vacuum() {
        let bad =
            GaussianState::new(DMatrix::identity(2, 2) * 0.5, DVector::zeros(2), &["A"]).unwrap();
        assert!(!bad.is_physical());
        assert!(GaussianState::vacuum(&["A", "B"]).is_physical());
    }
}
