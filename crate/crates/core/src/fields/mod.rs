//! Field containers, spectral diagnostics, metrics and on-disk format.

mod fft;
mod metrics;
mod pack;
mod series;
mod spectrum;

pub use fft::{fft2, ifft2, signed_freq};
pub use metrics::{compute_metrics, ChannelMetrics, MetricReport};
pub use pack::{
    decode_f32le, fieldpack_read, fieldpack_write, read_container, write_container, PackHeader,
    DTYPE_F32LE,
};
pub use series::FieldSeries;
pub use spectrum::{
    high_band_start, k_max, mean_profile, radial_bin, radial_energy_spectrum, residual_spectrum, ResidualSpectrum,
    SpectrumProfile, LOG_FLOOR,
};
