use ndarray::{ArrayView2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::fft::{fft2, signed_freq};
use super::series::FieldSeries;
use crate::error::{Error, Result};

/// Floor added before taking the log of a bin energy, so empty bins stay finite.
pub const LOG_FLOOR: f64 = 1e-20;

/// Radially binned spectral energy of a 2D field.
///
/// Bin `k` holds the total `|FFT|^2` (unnormalised forward transform) of all
/// frequency cells `(u, v)` with `floor(sqrt(u^2 + v^2)) = k`, measured from
/// the centred zero frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    pub energy: Vec<f64>,
    pub log_energy: Vec<f64>,
}

impl SpectrumProfile {
    pub fn from_energy(energy: Vec<f64>) -> Self {
        let log_energy = energy.iter().map(|e| (e + LOG_FLOOR).ln()).collect();
        Self { energy, log_energy }
    }

    pub fn k_max(&self) -> usize {
        self.energy.len() - 1
    }

    pub fn total(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Sum of energy over bins `k >= start`.
    pub fn band_energy_from(&self, start: usize) -> f64 {
        self.energy.iter().skip(start).sum()
    }

    /// Energy in the top third of wavenumber bins.
    pub fn high_band_energy(&self) -> f64 {
        self.band_energy_from(high_band_start(self.energy.len()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("wavenumber,energy,log_energy\n");
        for (k, (e, l)) in self.energy.iter().zip(&self.log_energy).enumerate() {
            out.push_str(&format!("{k},{e:.12e},{l:.12e}\n"));
        }
        out
    }
}

/// First bin of the top third of `n_bins` wavenumber bins.
pub fn high_band_start(n_bins: usize) -> usize {
    n_bins - n_bins.div_ceil(3)
}

/// `floor(sqrt((H/2)^2 + (W/2)^2))`.
pub fn k_max(h: usize, w: usize) -> usize {
    let hh = (h / 2) as f64;
    let ww = (w / 2) as f64;
    (hh * hh + ww * ww).sqrt().floor() as usize
}

/// `floor(sqrt(u^2 + v^2))`, computed exactly.
pub fn radial_bin(u: i64, v: i64) -> usize {
    // exact integer floor(sqrt(u^2 + v^2))
    let r2 = (u * u + v * v) as u64;
    let mut k = (r2 as f64).sqrt() as u64;
    while k * k > r2 {
        k -= 1;
    }
    while (k + 1) * (k + 1) <= r2 {
        k += 1;
    }
    k as usize
}

/// Radial energy spectrum of a real `H x W` grid.
pub fn radial_energy_spectrum(field: ArrayView2<'_, f64>) -> Result<SpectrumProfile> {
    let (h, w) = field.dim();
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("spectrum needs at least 2x2, got {h}x{w}")));
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "radial_energy_spectrum input contains NaN or Inf".into(),
        ));
    }
    let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, h, w);
    let mut energy = vec![0.0; k_max(h, w) + 1];
    for y in 0..h {
        let u = signed_freq(y, h);
        for x in 0..w {
            let v = signed_freq(x, w);
            energy[radial_bin(u, v)] += buf[y * w + x].norm_sqr();
        }
    }
    Ok(SpectrumProfile::from_energy(energy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpectrum {
    pub sample: usize,
    pub frame: usize,
    pub channel: usize,
    pub profile: SpectrumProfile,
}

/// Radial spectrum of `pred - truth` for every (sample, frame, channel).
pub fn residual_spectrum(pred: &FieldSeries, truth: &FieldSeries) -> Result<Vec<ResidualSpectrum>> {
    pred.same_shape(truth)?;
    let [b, t, _, _, c] = pred.shape();
    let mut out = Vec::with_capacity(b * t * c);
    for sample in 0..b {
        for frame in 0..t {
            for channel in 0..c {
                let mut diff = pred.plane(sample, frame, channel);
                Zip::from(&mut diff)
                    .and(&truth.plane_view(sample, frame, channel))
                    .for_each(|d, &tv| *d -= tv as f64);
                out.push(ResidualSpectrum {
                    sample,
                    frame,
                    channel,
                    profile: radial_energy_spectrum(diff.view())?,
                });
            }
        }
    }
    Ok(out)
}

/// Bin-wise mean of several profiles of equal length.
pub fn mean_profile<'a>(profiles: impl IntoIterator<Item = &'a SpectrumProfile>) -> Result<SpectrumProfile> {
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for p in profiles {
        match acc.as_mut() {
            None => acc = Some(p.energy.clone()),
            Some(a) => {
                if a.len() != p.energy.len() {
                    return Err(Error::shape("spectrum profiles have different bin counts"));
                }
                a.iter_mut().zip(&p.energy).for_each(|(x, y)| *x += y);
            }
        }
        n += 1;
    }
    let mut energy = acc.ok_or_else(|| Error::shape("mean of zero spectrum profiles"))?;
    energy.iter_mut().for_each(|e| *e /= n as f64);
    Ok(SpectrumProfile::from_energy(energy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use std::f64::consts::PI;

    fn brute_force(field: &Array2<f64>) -> Vec<f64> {
        let (h, w) = field.dim();
        let mut energy = vec![0.0; k_max(h, w) + 1];
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        acc += field[[y, x]] * Complex64::from_polar(1.0, phase);
                    }
                }
                let u = if ky < h.div_ceil(2) { ky as f64 } else { ky as f64 - h as f64 };
                let v = if kx < w.div_ceil(2) { kx as f64 } else { kx as f64 - w as f64 };
                let k = (u * u + v * v).sqrt().floor() as usize;
                energy[k] += acc.norm_sqr();
            }
        }
        energy
    }

    #[test]
    fn constant_field_is_all_dc() {
        let field = Array2::from_elem((8, 8), 3.0);
        let p = radial_energy_spectrum(field.view()).unwrap();
        assert!((p.energy[0] - (3.0 * 64.0f64).powi(2)).abs() < 1e-9);
        assert!(p.energy[1..].iter().all(|&e| e.abs() < 1e-18));
    }

    #[test]
    fn single_cosine_lands_in_its_bin() {
        let n = 32;
        let field = Array2::from_shape_fn((n, n), |(_, x)| (2.0 * PI * 3.0 * x as f64 / n as f64).cos());
        let p = radial_energy_spectrum(field.view()).unwrap();
        // two conjugate modes of amplitude N^2/2 each
        let expected = 2.0 * (n as f64 * n as f64 / 2.0).powi(2);
        assert!((p.energy[3] - expected).abs() / expected < 1e-12);
        for (k, e) in p.energy.iter().enumerate() {
            if k != 3 {
                assert!(*e < 1e-16 * expected, "bin {k} has {e}");
            }
        }
    }

    #[test]
    fn matches_brute_force_dft() {
        use rand::Rng;
        let mut rng = crate::rng::stream(7, "spectrum-test");
        for &(h, w) in &[(4usize, 4usize), (4, 6), (5, 4)] {
            let field = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0));
            let got = radial_energy_spectrum(field.view()).unwrap();
            let want = brute_force(&field);
            for (g, e) in got.energy.iter().zip(&want) {
                assert!((g - e).abs() <= 1e-10 * e.abs().max(1e-12), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn k_max_formula() {
        assert_eq!(k_max(64, 64), 45);
        assert_eq!(k_max(8, 8), 5);
        assert_eq!(k_max(128, 128), 90);
    }

    #[test]
    fn rejects_non_finite() {
        let mut field = Array2::zeros((4, 4));
        field[[1, 1]] = f64::NAN;
        assert!(matches!(radial_energy_spectrum(field.view()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn log_energy_is_floored() {
        let p = SpectrumProfile::from_energy(vec![0.0, 1.0]);
        assert_eq!(p.log_energy[0], LOG_FLOOR.ln());
        assert_eq!(p.log_energy[1], (1.0 + LOG_FLOOR).ln());
    }
}
