//! Near-field ULA geometry, steering vectors, per-subcarrier delay responses
//! and multipath channel synthesis.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Scenario constants for a half-wavelength ULA OFDM uplink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Antennas `N`.
    pub n_antennas: usize,
    /// RF chains `M`.
    pub n_rf: usize,
    /// Subcarriers `P`.
    pub n_subcarriers: usize,
    /// Pilot symbols `T`.
    pub n_symbols: usize,
    /// Users `K`.
    pub n_users: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
}

impl SystemConfig {
    pub fn new(
        n_antennas: usize,
        n_rf: usize,
        n_subcarriers: usize,
        n_symbols: usize,
        n_users: usize,
        carrier_hz: f64,
        bandwidth_hz: f64,
    ) -> Result<Self> {
        let cfg = Self {
            n_antennas,
            n_rf,
            n_subcarriers,
            n_symbols,
            n_users,
            carrier_hz,
            bandwidth_hz,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_symbols == 0 || self.n_subcarriers == 0 {
            return Err(arg_err("K, T and P must be positive"));
        }
        if !(self.n_users <= self.n_rf && self.n_rf <= self.n_antennas) {
            return Err(arg_err(format!(
                "need K <= M <= N, got K={} M={} N={}",
                self.n_users, self.n_rf, self.n_antennas
            )));
        }
        if self.n_subcarriers < self.n_users {
            return Err(arg_err(format!(
                "need P >= K, got P={} K={}",
                self.n_subcarriers, self.n_users
            )));
        }
        if !(self.carrier_hz > 0.0 && self.bandwidth_hz > 0.0) {
            return Err(arg_err("carrier and bandwidth must be positive"));
        }
        if self.bandwidth_hz >= 2.0 * self.carrier_hz {
            return Err(arg_err("bandwidth too wide for the carrier"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Element spacing `d = λ_c / 2`.
    pub fn spacing(&self) -> f64 {
        self.wavelength() / 2.0
    }

    /// Aperture `D = (N − 1) d`.
    pub fn aperture(&self) -> f64 {
        (self.n_antennas as f64 - 1.0) * self.spacing()
    }

    /// `d_R = 2D²/λ_c`.
    pub fn rayleigh_distance(&self) -> f64 {
        let d = self.aperture();
        2.0 * d * d / self.wavelength()
    }

    /// Frequency of subcarrier `p ∈ 1..=P`: `f_c + (2p − P)B/(2P)`.
    pub fn subcarrier_hz(&self, p: usize) -> f64 {
        let pf = self.n_subcarriers as f64;
        self.carrier_hz + (2.0 * p as f64 - pf) * self.bandwidth_hz / (2.0 * pf)
    }

    pub fn subcarrier_freqs(&self) -> Vec<f64> {
        (1..=self.n_subcarriers)
            .map(|p| self.subcarrier_hz(p))
            .collect()
    }

    /// Delay period of `|gᴴ(τ)ĝ|`: the response is invariant (up to a common
    /// phase) under `τ → τ + P/B`.
    pub fn delay_ambiguity(&self) -> f64 {
        self.n_subcarriers as f64 / self.bandwidth_hz
    }
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub user: usize,
    pub gain: Complex64,
    /// Delay in seconds.
    pub delay: f64,
    /// Angle in radians, measured from broadside.
    pub angle: f64,
    /// Distance from the reference antenna in meters.
    pub range: f64,
}

impl PathParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) {
            return Err(arg_err(format!(
                "path range must be positive, got {}",
                self.range
            )));
        }
        if !(self.angle.abs() < PI / 2.0) {
            return Err(arg_err(format!(
                "|angle| must be < π/2, got {}",
                self.angle
            )));
        }
        if !(self.delay >= 0.0) {
            return Err(arg_err(format!(
                "delay must be non-negative, got {}",
                self.delay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceModel {
    /// Second-order (Fresnel) expansion of the element distance.
    #[default]
    Fresnel,
    /// Exact spherical distance.
    Exact,
}

/// Distance from the source at `(range, angle)` to antenna `n ∈ 1..=N`.
pub fn element_distance(
    range: f64,
    angle: f64,
    n: usize,
    cfg: &SystemConfig,
    model: DistanceModel,
) -> Result<f64> {
    if !(range > 0.0) {
        return Err(arg_err(format!("range must be positive, got {range}")));
    }
    if n == 0 || n > cfg.n_antennas {
        return Err(arg_err(format!(
            "antenna index {n} outside 1..={}",
            cfg.n_antennas
        )));
    }
    Ok(element_offset(range, angle, n - 1, cfg.spacing(), model) + range)
}

/// `r⁽ⁿ⁾ − r` for zero-based element index `k = n − 1`.
#[inline]
pub(crate) fn element_offset(
    range: f64,
    angle: f64,
    k: usize,
    d: f64,
    model: DistanceModel,
) -> f64 {
    let x = k as f64 * d;
    match model {
        DistanceModel::Fresnel => {
            let c = angle.cos();
            -x * angle.sin() + x * x * c * c / (2.0 * range)
        }
        DistanceModel::Exact => {
            let q = x * x - 2.0 * range * x * angle.sin();
            q / ((range * range + q).sqrt() + range)
        }
    }
}

/// Near-field steering vector `b(θ, r)`, unit 2-norm, entry `n` equal to
/// `exp(−j 2π/λ (r⁽ⁿ⁾ − r)) / √N` with Fresnel distances.
pub fn steering_vector(
    angle: f64,
    range: f64,
    cfg: &SystemConfig,
    wavelength: f64,
) -> Vec<Complex64> {
    steering_vector_with(angle, range, cfg, wavelength, DistanceModel::Fresnel)
}

pub fn steering_vector_with(
    angle: f64,
    range: f64,
    cfg: &SystemConfig,
    wavelength: f64,
    model: DistanceModel,
) -> Vec<Complex64> {
    let n = cfg.n_antennas;
    let d = cfg.spacing();
    let amp = 1.0 / (n as f64).sqrt();
    let k = 2.0 * PI / wavelength;
    (0..n)
        .map(|i| Complex64::from_polar(amp, -k * element_offset(range, angle, i, d, model)))
        .collect()
}

/// Per-subcarrier phase response `g[p](τ) = exp(−j 2π f_p τ)`.
pub fn delay_response(delay: f64, cfg: &SystemConfig) -> Vec<Complex64> {
    (1..=cfg.n_subcarriers)
        .map(|p| Complex64::from_polar(1.0, -2.0 * PI * cfg.subcarrier_hz(p) * delay))
        .collect()
}

/// Channel of one user at subcarrier `p ∈ 1..=P`:
/// `h = Σ_l α_l exp(−j2π f_p τ_l) b(θ_l, r_l)`.
pub fn channel_vector(
    paths: &[PathParams],
    p: usize,
    cfg: &SystemConfig,
) -> Result<Vec<Complex64>> {
    if paths.is_empty() {
        return Err(arg_err("channel needs at least one path"));
    }
    if p == 0 || p > cfg.n_subcarriers {
        return Err(arg_err(format!(
            "subcarrier {p} outside 1..={}",
            cfg.n_subcarriers
        )));
    }
    let f = cfg.subcarrier_hz(p);
    let lambda = cfg.wavelength();
    let mut h = vec![Complex64::new(0.0, 0.0); cfg.n_antennas];
    for path in paths {
        let w = path.gain * Complex64::from_polar(1.0, -2.0 * PI * f * path.delay);
        for (hn, bn) in h
            .iter_mut()
            .zip(steering_vector(path.angle, path.range, cfg, lambda))
        {
            *hn += w * bn;
        }
    }
    Ok(h)
}

/// Free-space LoS gain with molecular absorption:
/// `c/(4π f d) · exp(−κ d / 2) · exp(−j 2π f τ)`.
pub fn los_gain(freq_hz: f64, dist: f64, absorption: f64, delay: f64) -> Result<Complex64> {
    if !(freq_hz > 0.0 && dist > 0.0 && absorption >= 0.0) {
        return Err(arg_err("los_gain needs f > 0, d > 0, κ >= 0"));
    }
    let mag = SPEED_OF_LIGHT / (4.0 * PI * freq_hz * dist) * (-0.5 * absorption * dist).exp();
    Ok(Complex64::from_polar(mag, -2.0 * PI * freq_hz * delay))
}

/// Log-distance NLoS path-gain model: `α ~ CN(0, 10^{−0.1(κ + μ)})` with
/// `κ = a + 10 b log10(d) + ε`, `ε ~ N(0, σ_ε²)` in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlosGainModel {
    pub intercept_db: f64,
    pub exponent: f64,
    pub shadow_sigma_db: f64,
    pub rician_db: f64,
}

impl Default for NlosGainModel {
    fn default() -> Self {
        Self {
            intercept_db: 61.4,
            exponent: 2.0,
            shadow_sigma_db: 5.8,
            rician_db: 7.0,
        }
    }
}

impl NlosGainModel {
    /// Path loss in dB for a given shadowing draw.
    pub fn path_loss_db(&self, dist: f64, shadow_db: f64) -> f64 {
        self.intercept_db + 10.0 * self.exponent * dist.log10() + shadow_db
    }

    /// Gain variance `10^{−0.1(κ + μ)}` for a given shadowing draw.
    pub fn variance(&self, dist: f64, shadow_db: f64) -> f64 {
        10f64.powf(-0.1 * (self.path_loss_db(dist, shadow_db) + self.rician_db))
    }

    pub fn sample<R: Rng + ?Sized>(&self, dist: f64, rng: &mut R) -> Result<Complex64> {
        if !(dist > 0.0) {
            return Err(arg_err(format!("distance must be positive, got {dist}")));
        }
        let shadow = if self.shadow_sigma_db > 0.0 {
            Normal::new(0.0, self.shadow_sigma_db)
                .map_err(|e| arg_err(e.to_string()))?
                .sample(rng)
        } else {
            0.0
        };
        Ok(sample_cn(rng, self.variance(dist, shadow)))
    }
}

/// Draw from the default NLoS gain model.
pub fn sample_nlos_gain<R: Rng + ?Sized>(dist: f64, rng: &mut R) -> Result<Complex64> {
    NlosGainModel::default().sample(dist, rng)
}

/// Circular complex Gaussian `CN(0, var)`.
pub fn sample_cn<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c64, numerical_rank, vec_norm, ComplexMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn thz(n: usize) -> SystemConfig {
        SystemConfig::new(n, 16, 32, 4, 4, 100e9, 0.1e9).unwrap()
    }

    #[test]
    fn rayleigh_distances() {
        let a = SystemConfig::new(256, 32, 64, 4, 8, 100e9, 0.1e9).unwrap();
        assert!((a.rayleigh_distance() - 97.5).abs() < 0.1);
        let b = SystemConfig::new(128, 64, 64, 4, 8, 30e9, 0.1e9).unwrap();
        assert!((b.rayleigh_distance() - 80.6).abs() < 0.1);
    }

    #[test]
    fn subcarriers_strictly_increase() {
        let f = thz(64).subcarrier_freqs();
        assert!(f.windows(2).all(|w| w[1] > w[0]));
        assert!((f[15] - 100e9).abs() < 1.0, "p = P/2 sits on the carrier");
    }

    #[test]
    fn config_invariants() {
        assert!(SystemConfig::new(64, 16, 32, 4, 17, 100e9, 1e8).is_err());
        assert!(SystemConfig::new(8, 16, 32, 4, 4, 100e9, 1e8).is_err());
        assert!(SystemConfig::new(64, 16, 2, 4, 4, 100e9, 1e8).is_err());
    }

    #[test]
    fn reference_antenna_distance_is_range() {
        let cfg = thz(64);
        for model in [DistanceModel::Fresnel, DistanceModel::Exact] {
            assert_eq!(element_distance(37.0, 0.3, 1, &cfg, model).unwrap(), 37.0);
        }
        assert!(element_distance(0.0, 0.3, 1, &cfg, DistanceModel::Fresnel).is_err());
        assert!(element_distance(3.0, 0.3, 65, &cfg, DistanceModel::Fresnel).is_err());
    }

    #[test]
    fn broadside_fresnel_distance() {
        let cfg = thz(64);
        let d = cfg.spacing();
        for n in [2usize, 10, 64] {
            let x = (n - 1) as f64 * d;
            let got = element_distance(20.0, 0.0, n, &cfg, DistanceModel::Fresnel).unwrap();
            assert!((got - (20.0 + x * x / 40.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn fresnel_regime_at_ten_apertures() {
        // At r = 10·D the Fresnel error stays below λ/16 over all angles for
        // N = 64; for wider arrays only near broadside.
        let cfg = thz(64);
        let r = 10.0 * cfg.aperture();
        let lam = cfg.wavelength();
        for i in 0..=180 {
            let th = (-89.0 + i as f64 * 178.0 / 180.0).to_radians();
            for n in 1..=64 {
                let ex = element_distance(r, th, n, &cfg, DistanceModel::Exact).unwrap();
                let fr = element_distance(r, th, n, &cfg, DistanceModel::Fresnel).unwrap();
                assert!((ex - fr).abs() / lam < 1.0 / 16.0, "θ={th} n={n}");
            }
        }
        let wide = SystemConfig::new(256, 32, 64, 4, 8, 100e9, 1e8).unwrap();
        let r = 10.0 * wide.aperture();
        for n in 1..=256 {
            let ex = element_distance(r, 0.0, n, &wide, DistanceModel::Exact).unwrap();
            let fr = element_distance(r, 0.0, n, &wide, DistanceModel::Fresnel).unwrap();
            assert!((ex - fr).abs() / wide.wavelength() < 1.0 / 16.0);
        }
    }

    #[test]
    fn steering_first_entry_and_norm() {
        let cfg = thz(128);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let th = rng.random_range(-1.5..1.5);
            let r = rng.random_range(1.0..200.0);
            let b = steering_vector(th, r, &cfg, cfg.wavelength());
            assert!((b[0] - c64(1.0 / (128f64).sqrt(), 0.0)).norm() < 1e-15);
            assert!((vec_norm(&b) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_far_field_limit() {
        let cfg = thz(32);
        let lam = cfg.wavelength();
        let th = 0.4;
        let b = steering_vector(th, 1e9, &cfg, lam);
        for (n, bn) in b.iter().enumerate() {
            let far = 2.0 * PI / lam * n as f64 * cfg.spacing() * th.sin();
            let want = Complex64::from_polar(1.0 / (32f64).sqrt(), far);
            assert!((bn - want).norm() < 1e-6);
        }
    }

    #[test]
    fn delay_response_properties() {
        let cfg = thz(16);
        assert!(delay_response(0.0, &cfg)
            .iter()
            .all(|z| (z - c64(1.0, 0.0)).norm() < 1e-15));
        assert!(delay_response(1.234e-7, &cfg)
            .iter()
            .all(|z| (z.norm() - 1.0).abs() < 1e-12));
        // |τ1 − τ2|·B not an integer → independent columns
        let g1 = delay_response(50e-9, &cfg);
        let g2 = delay_response(53.7e-9, &cfg);
        let m = ComplexMatrix::from_fn(
            cfg.n_subcarriers,
            2,
            |i, j| if j == 0 { g1[i] } else { g2[i] },
        );
        assert_eq!(numerical_rank(&m, 1e-10), 2);
    }

    #[test]
    fn channel_vector_single_path_and_linearity() {
        let cfg = thz(32);
        let path = PathParams {
            user: 0,
            gain: c64(1.0, 0.0),
            delay: 0.0,
            angle: 0.2,
            range: 30.0,
        };
        let h = channel_vector(&[path], 5, &cfg).unwrap();
        let b = steering_vector(0.2, 30.0, &cfg, cfg.wavelength());
        assert!(h.iter().zip(&b).all(|(x, y)| (x - y).norm() < 1e-15));
        let doubled = PathParams {
            gain: c64(2.0, 0.0),
            ..path
        };
        let h2 = channel_vector(&[doubled], 5, &cfg).unwrap();
        assert!(h.iter().zip(&h2).all(|(x, y)| (x * 2.0 - y).norm() < 1e-14));
        assert!(channel_vector(&[], 1, &cfg).is_err());
    }

    #[test]
    fn channel_vector_superposition() {
        let cfg = thz(32);
        let p1 = PathParams {
            user: 0,
            gain: c64(0.3, -1.0),
            delay: 7e-8,
            angle: -0.5,
            range: 22.0,
        };
        let p2 = PathParams {
            user: 0,
            gain: c64(-0.7, 0.2),
            delay: 9e-8,
            angle: 0.8,
            range: 61.0,
        };
        let both = channel_vector(&[p1, p2], 9, &cfg).unwrap();
        let a = channel_vector(&[p1], 9, &cfg).unwrap();
        let b = channel_vector(&[p2], 9, &cfg).unwrap();
        for i in 0..32 {
            assert!((both[i] - a[i] - b[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn los_gain_values() {
        let g = los_gain(100e9, 20.0, 0.0, 0.0).unwrap();
        assert!(g.im.abs() < 1e-30 && g.re > 0.0);
        assert!((g.re - SPEED_OF_LIGHT / (4.0 * PI * 100e9 * 20.0)).abs() < 1e-20);
        let g2 = los_gain(100e9, 40.0, 0.0, 0.0).unwrap();
        assert!((g.norm() / g2.norm() - 2.0).abs() < 1e-12);
        // independent evaluation of c/(4π f d)·exp(−κd/2) at f=100 GHz, κ=0.01, d=50 m
        let g = los_gain(100e9, 50.0, 0.01, 1.7e-7).unwrap();
        assert!((g.norm() - 3.715927346317688e-06).abs() < 1e-18);
        assert!(los_gain(100e9, 50.0, 0.02, 0.0).unwrap().norm() < g.norm());
        assert!(los_gain(100e9, 51.0, 0.01, 0.0).unwrap().norm() < g.norm());
        assert!(los_gain(100e9, -1.0, 0.01, 0.0).is_err());
    }

    #[test]
    fn nlos_gain_variance_and_slope() {
        let m = NlosGainModel::default();
        assert!((m.variance(1.0, 0.0) - 10f64.powf(-0.1 * (61.4 + 7.0))).abs() < 1e-20);
        let ratio_db = 10.0 * (m.variance(10.0, 0.0) / m.variance(100.0, 0.0)).log10();
        assert!((ratio_db - 20.0).abs() < 1e-9);
    }

    #[test]
    fn nlos_gain_monte_carlo_power() {
        let m = NlosGainModel {
            shadow_sigma_db: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| m.sample(30.0, &mut rng).unwrap().norm_sqr())
            .sum::<f64>()
            / n as f64;
        let want = m.variance(30.0, 0.0);
        assert!((mean / want - 1.0).abs() < 0.05, "{mean} vs {want}");
        assert!(m.sample(0.0, &mut rng).is_err());
    }

    #[test]
    fn distinct_steering_vectors_independent() {
        let cfg = thz(64);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let b1 = steering_vector(
                rng.random_range(-1.0..1.0),
                rng.random_range(5.0..100.0),
                &cfg,
                cfg.wavelength(),
            );
            let b2 = steering_vector(
                rng.random_range(-1.0..1.0),
                rng.random_range(5.0..100.0),
                &cfg,
                cfg.wavelength(),
            );
            let m = ComplexMatrix::from_fn(64, 2, |i, j| if j == 0 { b1[i] } else { b2[i] });
            assert_eq!(numerical_rank(&m, 1e-10), 2);
        }
    }
}
