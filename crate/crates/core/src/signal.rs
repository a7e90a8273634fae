//! Received-signal synthesis: scenarios, the noiseless observation tensor and
//! additive noise at a target SNR.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::geometry::{
    delay_response, los_gain, sample_cn, steering_vector, NlosGainModel, PathParams, SystemConfig,
    SPEED_OF_LIGHT,
};
use crate::linalg::{c64, ComplexMatrix};
use crate::pilots::{Combiner, PilotMatrix};
use crate::tensor::{FactorSet, Tensor3};

/// A complete multi-user uplink frame: geometry, per-user paths, pilots and
/// the analog combiner.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: SystemConfig,
    /// `paths[k]` holds the `L_k` paths of user `k`.
    pub paths: Vec<Vec<PathParams>>,
    pub pilots: PilotMatrix,
    pub combiner: Combiner,
}

impl Scenario {
    pub fn new(
        cfg: SystemConfig,
        paths: Vec<Vec<PathParams>>,
        pilots: PilotMatrix,
        combiner: Combiner,
    ) -> Result<Self> {
        cfg.validate()?;
        if paths.len() != cfg.n_users {
            return Err(dim_err(format!(
                "{} path groups for K={}",
                paths.len(),
                cfg.n_users
            )));
        }
        for (k, group) in paths.iter().enumerate() {
            if group.is_empty() {
                return Err(arg_err(format!("user {k} has no paths")));
            }
            for p in group {
                p.validate()?;
                if p.user != k {
                    return Err(arg_err(format!(
                        "path tagged user {} listed under user {k}",
                        p.user
                    )));
                }
            }
        }
        if pilots.n_symbols() != cfg.n_symbols || pilots.n_users() != cfg.n_users {
            return Err(dim_err("pilot matrix must be T×K"));
        }
        if combiner.n_antennas() != cfg.n_antennas || combiner.n_rf() != cfg.n_rf {
            return Err(dim_err("combiner must be N×M"));
        }
        Ok(Self {
            cfg,
            paths,
            pilots,
            combiner,
        })
    }

    /// `(L_1, …, L_K)`.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.paths.iter().map(Vec::len).collect()
    }

    pub fn n_paths(&self) -> usize {
        self.paths.iter().map(Vec::len).sum()
    }

    pub fn is_los(&self) -> bool {
        self.paths.iter().all(|g| g.len() == 1)
    }

    /// Paths in user-major order (the column order of the factor matrices).
    pub fn all_paths(&self) -> impl Iterator<Item = &PathParams> {
        self.paths.iter().flatten()
    }

    /// Binary `K×L` path-to-user mapping `O`.
    pub fn mapping(&self) -> DMatrix<f64> {
        let mut o = DMatrix::zeros(self.cfg.n_users, self.n_paths());
        for (l, p) in self.all_paths().enumerate() {
            o[(p.user, l)] = 1.0;
        }
        o
    }

    /// Ground-truth factors: `G = [g(τ_l)]`, `A = [α_l Wᴴ b_l]`, `S = S_o O`.
    pub fn factors(&self) -> FactorSet {
        let cfg = &self.cfg;
        let lambda = cfg.wavelength();
        let w = self.combiner.matrix();
        let l = self.n_paths();
        let mut g = ComplexMatrix::zeros(cfg.n_subcarriers, l);
        let mut a = ComplexMatrix::zeros(cfg.n_rf, l);
        let mut s = ComplexMatrix::zeros(cfg.n_symbols, l);
        for (j, path) in self.all_paths().enumerate() {
            for (p, z) in delay_response(path.delay, cfg).into_iter().enumerate() {
                g[(p, j)] = z;
            }
            let b =
                nalgebra::DVector::from_vec(steering_vector(path.angle, path.range, cfg, lambda));
            let wb = w.adjoint() * b * path.gain;
            a.set_column(j, &wb);
            s.set_column(j, &self.pilots.matrix().column(path.user));
        }
        FactorSet::with_blocks(g, a, s, self.block_sizes()).expect("consistent by construction")
    }

    /// `h_{p,k}` for every user and subcarrier: `out[k][p]` is an `N`-vector.
    pub fn channels(&self) -> Vec<Vec<Vec<Complex64>>> {
        channels_from_paths(&self.paths, &self.cfg)
    }
}

/// Channels `out[k][p]` from per-user path lists.
pub fn channels_from_paths(
    paths: &[Vec<PathParams>],
    cfg: &SystemConfig,
) -> Vec<Vec<Vec<Complex64>>> {
    let lambda = cfg.wavelength();
    let freqs = cfg.subcarrier_freqs();
    paths
        .iter()
        .map(|group| {
            let steer: Vec<Vec<Complex64>> = group
                .iter()
                .map(|p| steering_vector(p.angle, p.range, cfg, lambda))
                .collect();
            freqs
                .iter()
                .map(|&f| {
                    let mut h = vec![c64(0.0, 0.0); cfg.n_antennas];
                    for (path, b) in group.iter().zip(&steer) {
                        let w = path.gain * Complex64::from_polar(1.0, -2.0 * PI * f * path.delay);
                        for (hn, bn) in h.iter_mut().zip(b) {
                            *hn += w * bn;
                        }
                    }
                    h
                })
                .collect()
        })
        .collect()
}

/// Noiseless observation `Y[p,m,t] = Σ_l g_l[p] a_l[m] s̃_l[t]`.
pub fn synthesize(scenario: &Scenario) -> Tensor3 {
    let f = scenario.factors();
    let (p_dim, m_dim, t_dim) = f.dims();
    let mut y = Tensor3::zeros(p_dim, m_dim, t_dim);
    for l in 0..f.rank() {
        for t in 0..t_dim {
            let st = f.s[(t, l)];
            if st == c64(0.0, 0.0) {
                continue;
            }
            for m in 0..m_dim {
                let am = f.a[(m, l)] * st;
                for p in 0..p_dim {
                    let idx = y.index(p, m, t);
                    y.data_mut()[idx] += f.g[(p, l)] * am;
                }
            }
        }
    }
    y
}

/// Realized noise parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub snr_db: f64,
    /// Per-entry variance; zero for the noiseless passthrough.
    pub sigma2: f64,
}

/// `σ² = ‖y‖² / (PMT · 10^{snr/10})`.
pub fn noise_variance(y: &Tensor3, snr_db: f64) -> Result<f64> {
    let energy = y.norm_sq();
    if !(energy > 0.0) {
        return Err(Error::ZeroSignal);
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    if !snr_db.is_finite() {
        return Err(arg_err(format!("invalid SNR {snr_db}")));
    }
    Ok(energy / (y.len() as f64 * 10f64.powf(snr_db / 10.0)))
}

/// Add i.i.d. `CN(0, σ²)` noise; `snr_db = +∞` returns the input unchanged.
pub fn add_noise<R: Rng + ?Sized>(
    y: &Tensor3,
    snr_db: f64,
    rng: &mut R,
) -> Result<(Tensor3, NoiseSpec)> {
    let sigma2 = noise_variance(y, snr_db)?;
    let mut out = y.clone();
    if sigma2 > 0.0 {
        for z in out.data_mut() {
            *z += sample_cn(rng, sigma2);
        }
    }
    Ok((out, NoiseSpec { snr_db, sigma2 }))
}

/// Random user placement and path draws for Monte-Carlo trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioSampler {
    /// Half-width of the uniform angle interval, degrees.
    pub max_angle_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Molecular absorption coefficient for LoS gains (1/m).
    pub absorption: f64,
    pub nlos: NlosGainModel,
    /// Upper end of the user-to-scatterer excess delay (s).
    pub max_excess_delay: f64,
    /// Largest number of NLoS paths per user (drawn uniformly from `1..=max`).
    pub max_paths: usize,
}

impl Default for ScenarioSampler {
    fn default() -> Self {
        Self {
            max_angle_deg: 60.0,
            min_range: 20.0,
            max_range: 80.0,
            absorption: 0.01,
            nlos: NlosGainModel::default(),
            max_excess_delay: 2e-9,
            max_paths: 2,
        }
    }
}

impl ScenarioSampler {
    fn draw_position<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let lim = self.max_angle_deg.to_radians();
        (
            rng.random_range(-lim..lim),
            rng.random_range(self.min_range..self.max_range),
        )
    }

    /// One LoS path per user with `τ = r/c` and the absorption gain model.
    pub fn los_paths<R: Rng + ?Sized>(
        &self,
        cfg: &SystemConfig,
        rng: &mut R,
    ) -> Result<Vec<Vec<PathParams>>> {
        (0..cfg.n_users)
            .map(|k| {
                let (angle, range) = self.draw_position(rng);
                let delay = range / SPEED_OF_LIGHT;
                let gain = los_gain(cfg.carrier_hz, range, self.absorption, delay)?;
                Ok(vec![PathParams {
                    user: k,
                    gain,
                    delay,
                    angle,
                    range,
                }])
            })
            .collect()
    }

    /// `L_k ∈ 1..=max_paths` scattered paths per user. The path gain uses the
    /// user's own distance, the delay adds the scatterer leg to a random
    /// excess delay.
    pub fn nlos_paths<R: Rng + ?Sized>(
        &self,
        cfg: &SystemConfig,
        rng: &mut R,
    ) -> Result<Vec<Vec<PathParams>>> {
        (0..cfg.n_users)
            .map(|k| {
                let n_paths = rng.random_range(1..=self.max_paths.max(1));
                let user_dist = rng.random_range(self.min_range..self.max_range);
                (0..n_paths)
                    .map(|_| {
                        let (angle, range) = self.draw_position(rng);
                        let excess = rng.random_range(0.0..=self.max_excess_delay);
                        let gain = self.nlos.sample(user_dist, rng)?;
                        Ok(PathParams {
                            user: k,
                            gain,
                            delay: excess + range / SPEED_OF_LIGHT,
                            angle,
                            range,
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots::{design_pilots, random_combiner};
    use crate::tensor::cpd_reconstruct;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario(seed: u64, nlos: bool) -> Scenario {
        let cfg = SystemConfig::new(32, 8, 16, 4, 3, 100e9, 1e8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampler = ScenarioSampler::default();
        let paths = if nlos {
            sampler.nlos_paths(&cfg, &mut rng).unwrap()
        } else {
            sampler.los_paths(&cfg, &mut rng).unwrap()
        };
        let pilots = design_pilots(4, 3, &mut rng).unwrap();
        let comb = random_combiner(32, 8, &mut rng).unwrap();
        Scenario::new(cfg, paths, pilots, comb).unwrap()
    }

    #[test]
    fn single_path_matches_triple_loop() {
        let cfg = SystemConfig::new(16, 1, 8, 3, 1, 100e9, 1e8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pilots = design_pilots(3, 1, &mut rng).unwrap();
        let w = ComplexMatrix::from_element(16, 1, c64(1.0, 0.0));
        let comb = Combiner::from_matrix(w).unwrap();
        let path = PathParams {
            user: 0,
            gain: c64(1.0, 0.0),
            delay: 0.0,
            angle: 0.3,
            range: 12.0,
        };
        let sc = Scenario::new(cfg, vec![vec![path]], pilots.clone(), comb).unwrap();
        let y = synthesize(&sc);
        let b = steering_vector(0.3, 12.0, &cfg, cfg.wavelength());
        let sum: Complex64 = b.iter().sum();
        for p in 0..8 {
            for t in 0..3 {
                let want = sum * pilots.matrix()[(t, 0)];
                assert!((y.get(p, 0, t) - want).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn equals_factor_reconstruction() {
        for nlos in [false, true] {
            let sc = scenario(9, nlos);
            let y = synthesize(&sc);
            let r = cpd_reconstruct(&sc.factors());
            assert!(y.sub(&r).unwrap().norm() <= 1e-12 * y.norm());
        }
    }

    #[test]
    fn zero_gains_give_zero_tensor() {
        let mut sc = scenario(2, true);
        for g in sc.paths.iter_mut().flatten() {
            g.gain = c64(0.0, 0.0);
        }
        let y = synthesize(&sc);
        assert_eq!(y.norm(), 0.0);
        assert!(matches!(
            add_noise(&y, 10.0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::ZeroSignal)
        ));
    }

    #[test]
    fn synthesis_is_linear_in_gain() {
        let sc = scenario(4, true);
        let base = synthesize(&sc);
        let mut sc2 = sc.clone();
        let z = c64(0.5, -1.5);
        sc2.paths[1][0].gain *= z;
        let mut sc3 = sc.clone();
        sc3.paths[1][0].gain = c64(0.0, 0.0);
        // y(zα) = y(0) + z (y(α) − y(0))
        let y0 = synthesize(&sc3);
        let want = y0.add(&base.sub(&y0).unwrap().scale(z)).unwrap();
        assert!(synthesize(&sc2).sub(&want).unwrap().norm() < 1e-12 * base.norm());
    }

    #[test]
    fn mode3_unfolding_has_pilot_block_form() {
        let sc = scenario(13, true);
        let y = synthesize(&sc);
        let f = sc.factors();
        // Y_(3) = S_o [vec(G_1 A_1ᵀ) … vec(G_K A_Kᵀ)]ᵀ in the p-fastest layout.
        let mut x = ComplexMatrix::zeros(sc.cfg.n_users, 16 * 8);
        let mut col = 0;
        for (k, &lk) in sc.block_sizes().iter().enumerate() {
            let blk = f.g.columns(col, lk) * f.a.columns(col, lk).transpose();
            for m in 0..8 {
                for p in 0..16 {
                    x[(k, p + 16 * m)] = blk[(p, m)];
                }
            }
            col += lk;
        }
        let y3 = y.unfold(3).unwrap();
        let want = sc.pilots.matrix() * x;
        assert!(crate::linalg::frob_norm(&(y3 - &want)) < 1e-12 * crate::linalg::frob_norm(&want));
    }

    #[test]
    fn mapping_rows_count_paths() {
        let sc = scenario(21, true);
        let o = sc.mapping();
        for (k, &lk) in sc.block_sizes().iter().enumerate() {
            assert_eq!(o.row(k).sum() as usize, lk);
        }
        assert_eq!(o.sum() as usize, sc.n_paths());
    }

    #[test]
    fn noise_variance_formula_and_energy() {
        let y = Tensor3::from_fn((8, 8, 8), |p, m, t| c64(((p + m + t) as f64).sin(), 0.0));
        let y = y.scale(c64(1.0 / y.norm(), 0.0));
        assert!((noise_variance(&y, 10.0).unwrap() - 1.0 / 5120.0).abs() < 1e-18);
        assert!((noise_variance(&y, 0.0).unwrap() * 512.0 - 1.0).abs() < 1e-12);
        let mut total = 0.0;
        for seed in 0..100 {
            let (noisy, spec) = add_noise(&y, 10.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((spec.sigma2 - 1.0 / 5120.0).abs() < 1e-18);
            total += noisy.sub(&y).unwrap().norm_sq();
        }
        let mean = total / 100.0;
        assert!((mean / 0.1 - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn infinite_snr_is_passthrough() {
        let sc = scenario(1, false);
        let y = synthesize(&sc);
        let (out, spec) = add_noise(&y, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, y);
        assert_eq!(spec.sigma2, 0.0);
    }

    #[test]
    fn sampler_respects_ranges() {
        let cfg = SystemConfig::new(32, 8, 16, 4, 8, 30e9, 1e8).unwrap();
        let s = ScenarioSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            for g in s.los_paths(&cfg, &mut rng).unwrap() {
                let p = g[0];
                assert!(p.angle.abs() <= 60f64.to_radians() && (20.0..80.0).contains(&p.range));
                assert!((p.delay - p.range / SPEED_OF_LIGHT).abs() < 1e-20);
            }
            for g in s.nlos_paths(&cfg, &mut rng).unwrap() {
                assert!((1..=2).contains(&g.len()));
                for p in g {
                    let excess = p.delay - p.range / SPEED_OF_LIGHT;
                    assert!((-1e-18..=2e-9 + 1e-18).contains(&excess));
                }
            }
        }
    }
}
