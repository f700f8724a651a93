//! Synthetic gridded monthly data with the sign pattern of the real
//! covariates: precipitation alternates between years, VPD persists.
//!
//! The August vegetation index is a smooth function of the realized
//! January-August precipitation mean and July-August VPD mean plus noise, so
//! those two windows are the true covariates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{snap, RawRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub nlon: usize,
    pub nlat: usize,
    pub first_year: i32,
    pub n_years: usize,
    pub seed: u64,
    pub lon0: f64,
    pub lat0: f64,
    pub cell: f64,
    /// Lag-1 correlation of annual precipitation anomalies.
    pub precip_phi: f64,
    /// Lag-1 correlation of annual VPD anomalies.
    pub vpd_phi: f64,
    pub precip_sd: f64,
    pub vpd_sd: f64,
    /// Month-to-month noise sd, as a multiple of the annual sd.
    pub month_noise: f64,
    pub ndvi_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nlon: 20,
            nlat: 20,
            first_year: 2003,
            n_years: 18,
            seed: 0,
            lon0: -110.0,
            lat0: 35.0,
            cell: 0.05,
            precip_phi: -0.6,
            vpd_phi: 0.5,
            precip_sd: 0.8,
            vpd_sd: 1.5,
            month_noise: 1.0,
            ndvi_noise: 0.004,
        }
    }
}

/// Stationary AR(1) path with marginal sd `sd`.
pub fn ar1_path(rng: &mut ChaCha8Rng, n: usize, phi: f64, sd: f64) -> Vec<f64> {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let innov = sd * (1.0 - phi * phi).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut a = sd * std.sample(rng);
    for _ in 0..n {
        out.push(a);
        a = phi * a + innov * std.sample(rng);
    }
    out
}

/// Vegetation response to standardized window anomalies.
pub fn ndvi_response(base: f64, precip_z: f64, vpd_z: f64) -> f64 {
    base + 0.05 * precip_z.tanh() - 0.03 * vpd_z - 0.005 * precip_z * vpd_z
}

/// Long-format records for `ndvi` (month 8), `precip` and `vpd` (months 1-12).
pub fn generate(cfg: &SynthConfig) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let n = cfg.n_years;
    let mut out = Vec::with_capacity(cfg.nlon * cfg.nlat * n * 25);
    for j in 0..cfg.nlat {
        for i in 0..cfg.nlon {
            let u = i as f64 / cfg.nlon.max(2) as f64;
            let v = j as f64 / cfg.nlat.max(2) as f64;
            let lon = snap(cfg.lon0 + i as f64 * cfg.cell);
            let lat = snap(cfg.lat0 + j as f64 * cfg.cell);
            let p_mean = 3.0 + 0.8 * (std::f64::consts::TAU * u).sin() * (std::f64::consts::PI * v).cos();
            let v_mean = 20.0 + 3.0 * u - 2.0 * v;
            let base = 0.3 + 0.1 * (3.0 * u).cos() * (2.0 * v + 0.5).sin();
            let pa = ar1_path(&mut rng, n, cfg.precip_phi, cfg.precip_sd);
            let va = ar1_path(&mut rng, n, cfg.vpd_phi, cfg.vpd_sd);
            for t in 0..n {
                let year = cfg.first_year + t as i32;
                let mut p_months = [0.0; 12];
                let mut v_months = [0.0; 12];
                for m in 0..12 {
                    p_months[m] = p_mean + pa[t] + cfg.month_noise * cfg.precip_sd * std.sample(&mut rng);
                    v_months[m] = v_mean + va[t] + cfg.month_noise * cfg.vpd_sd * std.sample(&mut rng);
                }
                let p_win = p_months[..8].iter().sum::<f64>() / 8.0;
                let v_win = (v_months[6] + v_months[7]) / 2.0;
                let ndvi = ndvi_response(
                    base,
                    (p_win - p_mean) / cfg.precip_sd,
                    (v_win - v_mean) / cfg.vpd_sd,
                ) + cfg.ndvi_noise * std.sample(&mut rng);
                for m in 0..12 {
                    out.push(record("precip", lon, lat, year, m as u8 + 1, p_months[m]));
                    out.push(record("vpd", lon, lat, year, m as u8 + 1, v_months[m]));
                }
                out.push(record("ndvi", lon, lat, year, 8, ndvi));
            }
        }
    }
    out
}

fn record(variable: &str, lon: f64, lat: f64, year: i32, month: u8, value: f64) -> RawRecord {
    RawRecord {
        variable: variable.to_string(),
        lon,
        lat,
        year,
        month,
        value,
    }
}
