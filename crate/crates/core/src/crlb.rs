//! Fisher information and Cramér-Rao bounds for the angle triplet and the
//! complex gain `xi`, stacked as `[omega11, omega1M, gamma, Re xi, Im xi]`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix5, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_xi, model_response, ModelResponse, PilotConfig, QuantizerSpec, XiForm};
use crate::geometry::{distance_radicand, AngleTriplet, LinearArray};
use crate::linalg::CVec;

/// Condition number above which bounds are flagged as unreliable.
pub const RELIABLE_CONDITION: f64 = 1e12;

/// Derivatives of one antenna-pair distance with respect to
/// `(omega11, omega1M, gamma)`, with `d11` tied to the two AoDs.
pub fn distance_partials(t: &AngleTriplet, lbs_m: f64, lb: f64, lu: f64) -> Result<[f64; 3]> {
    let cos_m = t.omega1m.cos();
    let apex = (t.omega1m - t.omega11).sin();
    if cos_m.abs() < 1e-15 || apex == 0.0 {
        return Err(Error::domain("distance partials are singular at this triplet"));
    }
    let d11 = lbs_m * cos_m / apex;
    if !(d11 > 0.0) {
        return Err(Error::domain(format!("reference distance must be positive, got {d11}")));
    }
    let r = distance_radicand(t, d11, lb, lu);
    if !(r > 0.0) {
        return Err(Error::domain("antenna-pair distance is zero"));
    }
    let d = r.sqrt();
    let (sw, cw) = t.omega11.sin_cos();
    let (swg, cwg) = (t.omega11 + t.gamma).sin_cos();
    // d(d^2)/d(d11) / 2
    let along = d11 + lb * sw - lu * swg;
    let dd11_dw11 = d11 / (t.omega1m - t.omega11).tan();
    let dd11_dw1m = -d11 * cw / (cos_m * apex);
    Ok([
        (dd11_dw11 * along + d11 * (lb * cw - lu * cwg)) / d,
        dd11_dw1m * along / d,
        lu * (lb * t.gamma.sin() - d11 * cwg) / d,
    ])
}

/// Distance partials for every stacked entry, in measurement order.
fn stacked_distance_partials(t: &AngleTriplet, cfg: &PilotConfig, bs: &LinearArray, ue: &LinearArray) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(cfg.active().len() * ue.len());
    for &m in cfg.active() {
        for &lu in ue.offsets() {
            out.push(distance_partials(t, bs.aperture(), bs.offset(m), lu)?);
        }
    }
    Ok(out)
}

/// Derivatives of the noiseless measurement `xi D h` with respect to the
/// five real parameters.
pub fn mu_partials(
    t: &AngleTriplet,
    xi: Complex64,
    cfg: &PilotConfig,
    bs: &LinearArray,
    ue: &LinearArray,
    wavelength: f64,
) -> Result<[CVec; 5]> {
    let resp = model_response(t, cfg, bs, ue, wavelength)?;
    let dd = stacked_distance_partials(t, cfg, bs, ue)?;
    let g = slope_factors(&resp, wavelength);
    let dh = resp.mean(Complex64::new(1.0, 0.0));
    let angle = |a: usize| CVec::from_iterator(dh.len(), (0..dh.len()).map(|i| xi * dd[i][a] * g[i] * dh[i]));
    Ok([angle(0), angle(1), angle(2), dh.clone(), dh * Complex64::i()])
}

/// `-(1/d + j k)` per entry. Times a distance partial this is one diagonal
/// entry of the angle sensitivity `G`.
fn slope_factors(resp: &ModelResponse, wavelength: f64) -> Vec<Complex64> {
    let k = 2.0 * PI / wavelength;
    resp.inv_dist.iter().map(|&v| -Complex64::new(v, k)).collect()
}

/// Gain of the noiseless model at the true angles: the least-squares fit to
/// the clean correlated measurement.
pub fn true_gain(t: &AngleTriplet, cfg: &PilotConfig, bs: &LinearArray, ue: &LinearArray, wavelength: f64) -> Result<Complex64> {
    let resp = model_response(t, cfg, bs, ue, wavelength)?;
    let clean = resp.mean(Complex64::from(cfg.amplitude() * wavelength / (4.0 * PI)));
    fit_xi(&clean, &resp, XiForm::LeastSquares)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisherMatrix {
    pub info: Matrix5<f64>,
    /// Inverse of `info`.
    pub covariance: Matrix5<f64>,
    /// Condition number after diagonal equilibration.
    pub condition: f64,
}

impl FisherMatrix {
    pub fn from_info(info: Matrix5<f64>) -> Result<Self> {
        if !info.iter().all(|x| x.is_finite()) {
            return Err(Error::Singular("Fisher matrix has non-finite entries".into()));
        }
        let scale: Vec<f64> = (0..5).map(|i| info[(i, i)]).collect();
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Singular("Fisher matrix has a non-positive diagonal entry".into()));
        }
        let s = Matrix5::from_diagonal(&nalgebra::Vector5::from_iterator(scale.iter().map(|v| 1.0 / v.sqrt())));
        let eq = s * info * s;
        let eig = SymmetricEigen::new(eq);
        let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e.abs())));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(lo > 0.0) {
            return Err(Error::Singular(format!("Fisher matrix is singular (condition number {condition:e})")));
        }
        let inv_eq = eig.eigenvectors * Matrix5::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e)) * eig.eigenvectors.transpose();
        let covariance = s * inv_eq * s;
        Ok(Self { info, covariance: 0.5 * (covariance + covariance.transpose()), condition })
    }

    pub fn is_reliable(&self) -> bool {
        self.condition <= RELIABLE_CONDITION
    }

    /// Unquantized bounds for `(omega11, omega1M, gamma)`.
    pub fn angle_bounds(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.covariance[(i, i)])
    }
}

/// `F_ij = Re[(2 / sigma2) d_i^H d_j]` straight from the partials.
pub fn fisher_from_partials(partials: &[CVec; 5], noise_var: f64) -> Result<Matrix5<f64>> {
    if !(noise_var > 0.0) {
        return Err(Error::invalid("noise variance must be positive"));
    }
    Ok(Matrix5::from_fn(|i, j| 2.0 / noise_var * partials[i].dotc(&partials[j]).re))
}

/// Fisher information assembled block by block from `D`, the distance
/// partials and the gain. `noise_var` is the per-entry variance of the
/// correlated measurement.
#[allow(clippy::too_many_arguments)]
pub fn fisher_matrix(
    t: &AngleTriplet,
    xi: Complex64,
    noise_var: f64,
    cfg: &PilotConfig,
    bs: &LinearArray,
    ue: &LinearArray,
    wavelength: f64,
) -> Result<FisherMatrix> {
    if !(noise_var > 0.0) {
        return Err(Error::invalid("noise variance must be positive"));
    }
    let resp = model_response(t, cfg, bs, ue, wavelength)?;
    let dd = stacked_distance_partials(t, cfg, bs, ue)?;
    let slope = slope_factors(&resp, wavelength);
    let c = 2.0 / noise_var;
    let mut f = Matrix5::zeros();
    let gain_block: f64 = resp.inv_dist.iter().map(|v| v * v).sum();
    f[(3, 3)] = c * gain_block;
    f[(4, 4)] = c * gain_block;
    for a in 0..3 {
        for b in a..3 {
            // conj(g_a) g_b is real: both share the factor -(1/d + jk).
            let v: f64 = (0..dd.len())
                .map(|e| resp.inv_dist[e].powi(2) * dd[e][a] * dd[e][b] * slope[e].norm_sqr())
                .sum();
            f[(a, b)] = c * xi.norm_sqr() * v;
            f[(b, a)] = f[(a, b)];
        }
        let (mut re_part, mut im_part) = (0.0, 0.0);
        for e in 0..dd.len() {
            let g = dd[e][a] * slope[e];
            let w = resp.inv_dist[e].powi(2);
            re_part += w * (xi.re * g.re + xi.im * g.im);
            im_part += w * (xi.re * g.im + xi.im * g.re);
        }
        f[(a, 3)] = c * re_part;
        f[(3, a)] = f[(a, 3)];
        f[(a, 4)] = c * im_part;
        f[(4, a)] = f[(a, 4)];
    }
    FisherMatrix::from_info(f)
}

/// Angle bounds after quantized feedback: `C_ii + step_i^2 / 12`.
pub fn quantized_crlb(fm: &FisherMatrix, spec: &QuantizerSpec) -> [f64; 3] {
    let extra = spec.error_variance();
    let base = fm.angle_bounds();
    std::array::from_fn(|i| base[i] + extra[i])
}

/// Bounds for one UE at its true angles, given the raw receiver noise.
pub fn angle_crlb(
    t: &AngleTriplet,
    cfg: &PilotConfig,
    noise_var: f64,
    bs: &LinearArray,
    ue: &LinearArray,
    wavelength: f64,
) -> Result<FisherMatrix> {
    let xi = true_gain(t, cfg, bs, ue, wavelength)?;
    fisher_matrix(t, xi, cfg.correlated_noise_var(noise_var), cfg, bs, ue, wavelength)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleName {
    Omega11,
    Omega1m,
    Gamma,
}

impl AngleName {
    pub const ALL: [AngleName; 3] = [AngleName::Omega11, AngleName::Omega1m, AngleName::Gamma];
}

/// One line of a bound sweep. `bits` is empty for unquantized feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlbRow {
    pub scenario: String,
    pub pilots: usize,
    pub bits: Option<u32>,
    pub angle: AngleName,
    pub crlb: f64,
    pub empirical_mse: Option<f64>,
}

pub fn write_crlb_csv<W: Write>(rows: &[CrlbRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_crlb_csv(rows: &[CrlbRow], path: &Path) -> Result<()> {
    write_crlb_csv(rows, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::ActiveSetRule;
    use crate::geometry::{pair_distance, placement_to_triplet, ref_distance_from_aods, Placement};

    fn arrays() -> (LinearArray, LinearArray) {
        (LinearArray::uniform_span(64, 2.0).unwrap(), LinearArray::uniform(4, 0.015).unwrap())
    }

    fn distance_at(x: [f64; 3], lbs_m: f64, lb: f64, lu: f64) -> f64 {
        let t = AngleTriplet::from_array(x);
        let d11 = ref_distance_from_aods(t.omega11, t.omega1m, lbs_m).unwrap();
        pair_distance(&t, d11, lb, lu).unwrap()
    }

    #[test]
    fn partials_match_finite_differences() {
        let (bs, ue) = arrays();
        let t = placement_to_triplet(&Placement::new(5.5, 0.6, 0.9).unwrap(), &bs, &ue).unwrap();
        let h = 1e-6;
        for (lb, lu) in [(0.0, 0.0), (0.7, 0.03), (2.0, 0.045)] {
            let p = distance_partials(&t, 2.0, lb, lu).unwrap();
            for a in 0..3 {
                let mut up = t.as_array();
                let mut dn = t.as_array();
                up[a] += h;
                dn[a] -= h;
                let fd = (distance_at(up, 2.0, lb, lu) - distance_at(dn, 2.0, lb, lu)) / (2.0 * h);
                if fd.abs() < 1e-9 {
                    assert!(p[a].abs() < 1e-9);
                } else {
                    assert!((p[a] - fd).abs() < 1e-5 * fd.abs(), "angle {a}: {} vs {fd}", p[a]);
                }
            }
        }
    }

    #[test]
    fn gamma_partial_vanishes_without_ue_offset() {
        let t = AngleTriplet::new(0.1, 0.4, 1.0);
        assert_eq!(distance_partials(&t, 2.0, 0.0, 0.0).unwrap()[2], 0.0);
    }

    #[test]
    fn mirrored_rays_swap_partials() {
        // A single UE antenna on the bisector of the BS array.
        let t = AngleTriplet::new(-0.3, 0.3, 0.0);
        let near = distance_partials(&t, 2.0, 0.0, 0.0).unwrap();
        let far = distance_partials(&t, 2.0, 2.0, 0.0).unwrap();
        assert!((near[0] + far[1]).abs() < 1e-12, "{near:?} {far:?}");
        assert!((near[1] + far[0]).abs() < 1e-12);
    }

    #[test]
    fn singular_partials_rejected() {
        assert!(distance_partials(&AngleTriplet::new(0.1, PI / 2.0, 0.0), 2.0, 0.0, 0.0).is_err());
        assert!(distance_partials(&AngleTriplet::new(0.3, 0.3, 0.0), 2.0, 0.0, 0.0).is_err());
    }

    fn setup() -> (AngleTriplet, PilotConfig, LinearArray, LinearArray) {
        let (bs, ue) = arrays();
        let t = placement_to_triplet(&Placement::new(6.0, -0.5, 1.3).unwrap(), &bs, &ue).unwrap();
        let cfg = PilotConfig::dft(64, 4, 5e-4, ActiveSetRule::default()).unwrap();
        (t, cfg, bs, ue)
    }

    #[test]
    fn mu_partials_match_finite_differences() {
        let (t, cfg, bs, ue) = setup();
        let xi = Complex64::new(0.7, -0.4);
        let p = mu_partials(&t, xi, &cfg, &bs, &ue, 0.03).unwrap();
        let mu = |x: [f64; 5]| {
            model_response(&AngleTriplet::from_array([x[0], x[1], x[2]]), &cfg, &bs, &ue, 0.03)
                .unwrap()
                .mean(Complex64::new(x[3], x[4]))
        };
        let base = [t.omega11, t.omega1m, t.gamma, xi.re, xi.im];
        for (a, pa) in p.iter().enumerate() {
            let h = if a < 3 { 1e-7 } else { 1e-3 };
            let mut up = base;
            let mut dn = base;
            up[a] += h;
            dn[a] -= h;
            let fd = (mu(up) - mu(dn)) / Complex64::from(2.0 * h);
            assert!((pa - &fd).norm() < 1e-5 * fd.norm(), "param {a}");
        }
        let resp = model_response(&t, &cfg, &bs, &ue, 0.03).unwrap();
        assert_eq!(p[3], resp.mean(Complex64::new(1.0, 0.0)));
        let zero = mu_partials(&t, Complex64::new(0.0, 0.0), &cfg, &bs, &ue, 0.03).unwrap();
        assert!(zero[..3].iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn block_assembly_matches_definition() {
        let (t, cfg, bs, ue) = setup();
        let xi = true_gain(&t, &cfg, &bs, &ue, 0.03).unwrap();
        let sigma = 7.9e-13;
        let fm = fisher_matrix(&t, xi, sigma, &cfg, &bs, &ue, 0.03).unwrap();
        let generic = fisher_from_partials(&mu_partials(&t, xi, &cfg, &bs, &ue, 0.03).unwrap(), sigma).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let scale = (generic[(i, i)] * generic[(j, j)]).sqrt();
                assert!((fm.info[(i, j)] - generic[(i, j)]).abs() < 1e-10 * scale, "({i},{j})");
            }
        }
        assert_eq!(fm.info[(3, 4)], 0.0);
        assert!(generic[(3, 4)].abs() < 1e-10 * generic[(3, 3)]);
        let half = fisher_matrix(&t, xi, 2.0 * sigma, &cfg, &bs, &ue, 0.03).unwrap();
        assert!((half.info * 2.0 - fm.info).norm() < 1e-12 * fm.info.norm());
        assert!(fm.is_reliable(), "cond {}", fm.condition);
    }

    #[test]
    fn covariance_inverts_information() {
        let (t, cfg, bs, ue) = setup();
        let fm = angle_crlb(&t, &cfg, 3.16e-12, &bs, &ue, 0.03).unwrap();
        let s = Matrix5::from_diagonal(&fm.info.diagonal().map(|v| 1.0 / v.sqrt()));
        let prod = (s * fm.info * s) * (s.try_inverse().unwrap() * fm.covariance * s.try_inverse().unwrap());
        assert!((prod - Matrix5::identity()).norm() < 1e-6);
        let eig = SymmetricEigen::new(fm.info).eigenvalues;
        assert!(eig.iter().all(|&e| e >= -1e-10 * fm.info.trace()));
    }

    #[test]
    fn quantized_bounds() {
        let (t, cfg, bs, ue) = setup();
        let fm = angle_crlb(&t, &cfg, 3.16e-12, &bs, &ue, 0.03).unwrap();
        let ranges = [(-PI / 2.0, PI / 2.0), (-PI / 2.0, PI / 2.0), (0.0, PI)];
        let exact = quantized_crlb(&fm, &QuantizerSpec::new(None, ranges).unwrap());
        assert_eq!(exact, fm.angle_bounds());
        let mut prev = [f64::INFINITY; 3];
        for q in [4, 6, 8, 12] {
            let b = quantized_crlb(&fm, &QuantizerSpec::new(Some(q), ranges).unwrap());
            assert!((0..3).all(|i| b[i] <= prev[i] && b[i] > exact[i]));
            prev = b;
        }
    }

    #[test]
    fn singular_information_reported() {
        let mut f = Matrix5::identity();
        f[(0, 1)] = 1.0;
        f[(1, 0)] = 1.0;
        assert!(matches!(FisherMatrix::from_info(f), Err(Error::Singular(_))));
    }

    #[test]
    fn crlb_csv_header() {
        let rows = vec![CrlbRow {
            scenario: "a".into(),
            pilots: 4,
            bits: None,
            angle: AngleName::Gamma,
            crlb: 1e-6,
            empirical_mse: Some(2e-6),
        }];
        let mut buf = Vec::new();
        write_crlb_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "scenario,pilots,bits,angle,crlb,empirical_mse");
        assert_eq!(text.lines().nth(1).unwrap(), "a,4,,gamma,1e-6,2e-6");
    }
}
