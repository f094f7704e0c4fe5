use log::warn;
use serde::{Deserialize, Serialize};

use super::series::FieldSeries;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: usize,
    pub mse: f64,
    /// `None` when the ground truth of this channel has zero norm in some sample.
    pub nrmse: Option<f64>,
    pub max_err: f64,
}

/// Error summary of a prediction against ground truth.
///
/// `nrmse` is the per-sample relative L2 error `||pred - truth|| / ||truth||`
/// averaged over the batch; `max_err` is the maximum absolute error over every
/// sample, frame, grid point and channel of the set (a dataset-level maximum,
/// not a per-trajectory one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub nrmse: Option<f64>,
    pub max_err: f64,
    pub per_sample_nrmse: Vec<Option<f64>>,
    pub per_channel: Vec<ChannelMetrics>,
}

impl MetricReport {
    pub fn nrmse_or_nan(&self) -> f64 {
        self.nrmse.unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,nrmse\n");
        for (i, v) in self.per_sample_nrmse.iter().enumerate() {
            match v {
                Some(v) => out.push_str(&format!("{i},{v:.12e}\n")),
                None => out.push_str(&format!("{i},\n")),
            }
        }
        out
    }
}

fn relative(num: f64, den: f64) -> Option<f64> {
    if den > 0.0 {
        Some((num / den).sqrt())
    } else {
        None
    }
}

pub fn compute_metrics(pred: &FieldSeries, truth: &FieldSeries) -> Result<MetricReport> {
    pred.same_shape(truth)?;
    let [b, t, h, w, c] = pred.shape();
    let per_sample = t * h * w * c;
    let p: Vec<f32> = pred.values().iter().copied().collect();
    let q: Vec<f32> = truth.values().iter().copied().collect();

    let mut sq_sum = 0.0;
    let mut max_err = 0.0f64;
    let mut ch_sq = vec![0.0; c];
    let mut ch_max = vec![0.0f64; c];
    let mut per_sample_nrmse = Vec::with_capacity(b);
    let mut ch_rel: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(b); c];

    for s in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut ch_num = vec![0.0; c];
        let mut ch_den = vec![0.0; c];
        for i in 0..per_sample {
            let idx = s * per_sample + i;
            let ch = i % c;
            let tv = q[idx] as f64;
            let d = p[idx] as f64 - tv;
            let d2 = d * d;
            num += d2;
            den += tv * tv;
            ch_num[ch] += d2;
            ch_den[ch] += tv * tv;
            ch_max[ch] = ch_max[ch].max(d.abs());
            max_err = max_err.max(d.abs());
        }
        sq_sum += num;
        for ch in 0..c {
            ch_sq[ch] += ch_num[ch];
            ch_rel[ch].push(relative(ch_num[ch], ch_den[ch]));
        }
        per_sample_nrmse.push(relative(num, den));
    }

    let mean_defined = |vals: &[Option<f64>]| -> Option<f64> {
        let defined: Option<Vec<f64>> = vals.iter().copied().collect();
        defined.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let nrmse = mean_defined(&per_sample_nrmse);
    if nrmse.is_none() {
        warn!("ground truth has zero norm in at least one sample; nRMSE is undefined");
    }
    let n_total = (b * per_sample) as f64;
    let per_channel = (0..c)
        .map(|ch| ChannelMetrics {
            channel: ch,
            mse: ch_sq[ch] / (n_total / c as f64),
            nrmse: mean_defined(&ch_rel[ch]),
            max_err: ch_max[ch],
        })
        .collect();
    Ok(MetricReport {
        mse: sq_sum / n_total,
        nrmse,
        max_err,
        per_sample_nrmse,
        per_channel,
    })
}
