//! Training loss and evaluation metrics.
//!
//! The data error is the Huber norm; the training loss augments it with a
//! confidence reward that decays with the epoch index p:
//!
//!   E  = huber(z - t)
//!   E~ = E - (1/p) * (C - E*C)
//!
//! so minimizing the loss also pushes the output confidence up where the
//! data error is small, while the E*C term stops the confidence from
//! growing without bound and the 1/p weight keeps the reward from
//! dominating once the data error converges.
//!
//! Metrics are MAE/RMSE on the data units plus iMAE/iRMSE on inverse depth
//! in 1/km, and a rank-based Pearson analysis between prediction error and
//! negative log confidence.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Huber norm: quadratic below `delta`, linear above.
pub fn huber(z: f64, t: f64, delta: f64) -> f64 {
    let d = (z - t).abs();
    if d < delta {
        0.5 * d * d
    } else {
        delta * d - 0.5 * delta * delta
    }
}

/// d huber / d z; continuous across the branch point.
pub fn huber_derivative(z: f64, t: f64, delta: f64) -> f64 {
    let d = z - t;
    if d.abs() < delta {
        d
    } else {
        delta * d.signum()
    }
}

/// Which data term the training loss uses and whether the confidence
/// reward is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Huber data term plus the decaying confidence reward.
    HuberConf,
    /// Huber data term only; the confidence path receives no gradient.
    HuberOnly,
    /// Half squared error plus the confidence reward.
    L2Conf,
}

impl LossMode {
    pub fn parse(name: &str) -> Result<LossMode> {
        match name {
            "conf" => Ok(LossMode::HuberConf),
            "huber" => Ok(LossMode::HuberOnly),
            "l2conf" => Ok(LossMode::L2Conf),
            other => Err(Error::arg(format!("unknown loss mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::HuberConf => "conf",
            LossMode::HuberOnly => "huber",
            LossMode::L2Conf => "l2conf",
        }
    }
}

/// Per-batch loss decomposition; `total = data_term - conf_term`.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub data_term: f64,
    pub conf_term: f64,
    pub total: f64,
    pub epoch: usize,
}

/// Loss gradients with respect to the network outputs.
pub struct LossGrads {
    pub z: Tensor,
    pub c: Tensor,
}

/// Confidence-augmented loss, averaged over the valid ground-truth pixels.
///
/// `valid` masks pixels with usable ground truth; invalid pixels contribute
/// nothing to the loss or the gradients. `epoch` is 1-based.
pub fn confidence_loss(
    pred: &Tensor,
    conf: &Tensor,
    target: &Tensor,
    valid: &[bool],
    epoch: usize,
    mode: LossMode,
    delta: f64,
) -> Result<(LossReport, LossGrads)> {
    if pred.shape() != conf.shape() || pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "loss inputs disagree: pred {:?}, conf {:?}, target {:?}",
            pred.shape(),
            conf.shape(),
            target.shape()
        )));
    }
    if valid.len() != pred.len() {
        return Err(Error::shape(format!(
            "valid mask has {} entries for {} pixels",
            valid.len(),
            pred.len()
        )));
    }
    if epoch < 1 {
        return Err(Error::arg("epoch index is 1-based"));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::arg("no valid ground-truth pixels"));
    }
    let inv_n = 1.0 / n as f64;
    let inv_p = 1.0 / epoch as f64;

    let mut data_sum = 0.0;
    let mut conf_sum = 0.0;
    let mut grad_z = Tensor::zeros(pred.shape());
    let mut grad_c = Tensor::zeros(pred.shape());
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let (z, c, t) = (pred.data()[i], conf.data()[i], target.data()[i]);
        let (e, de) = match mode {
            LossMode::HuberConf | LossMode::HuberOnly => {
                (huber(z, t, delta), huber_derivative(z, t, delta))
            }
            LossMode::L2Conf => (0.5 * (z - t) * (z - t), z - t),
        };
        data_sum += e;
        match mode {
            LossMode::HuberOnly => {
                grad_z.data_mut()[i] = de * inv_n;
            }
            LossMode::HuberConf | LossMode::L2Conf => {
                conf_sum += inv_p * (c - e * c);
                grad_z.data_mut()[i] = de * (1.0 + c * inv_p) * inv_n;
                grad_c.data_mut()[i] = -(1.0 - e) * inv_p * inv_n;
            }
        }
    }
    let data_term = data_sum * inv_n;
    let conf_term = conf_sum * inv_n;
    Ok((
        LossReport {
            data_term,
            conf_term,
            total: data_term - conf_term,
            epoch,
        },
        LossGrads {
            z: grad_z,
            c: grad_c,
        },
    ))
}

/// Completion quality: MAE/RMSE in data units, iMAE/iRMSE on inverse depth
/// in 1/km, and the pixel count used.
#[derive(Debug, Clone, Copy)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub imae: f64,
    pub irmse: f64,
    pub count: usize,
}

impl fmt::Display for MetricsReport {
    /// Single CSV line: `mae,rmse,imae,irmse,n`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.mae, self.rmse, self.imae, self.irmse, self.count
        )
    }
}

/// Depth completion metrics over the valid pixels.
///
/// `unit_scale` converts stored values to meters (1.0 when the tensors
/// already hold meters); inverse depth is computed as 1000 / meters, i.e.
/// in 1/km. Ground truth must be positive on valid pixels.
pub fn depth_metrics(
    pred: &Tensor,
    target: &Tensor,
    valid: &[bool],
    unit_scale: f64,
) -> Result<MetricsReport> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if valid.len() != pred.len() {
        return Err(Error::shape(format!(
            "valid mask has {} entries for {} pixels",
            valid.len(),
            pred.len()
        )));
    }
    let mut n = 0usize;
    let (mut abs_sum, mut sq_sum, mut iabs_sum, mut isq_sum) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let (z, t) = (pred.data()[i], target.data()[i]);
        if t <= 0.0 {
            return Err(Error::arg(format!(
                "nonpositive ground-truth depth {t} at pixel {i}; inverse-depth metrics undefined"
            )));
        }
        let err = z - t;
        abs_sum += err.abs();
        sq_sum += err * err;
        let iz = 1000.0 / (z * unit_scale);
        let it = 1000.0 / (t * unit_scale);
        let ierr = iz - it;
        iabs_sum += ierr.abs();
        isq_sum += ierr * ierr;
        n += 1;
    }
    if n == 0 {
        return Err(Error::arg("no valid pixels to evaluate"));
    }
    let fnn = n as f64;
    Ok(MetricsReport {
        mae: abs_sum / fnn,
        rmse: (sq_sum / fnn).sqrt(),
        imae: iabs_sum / fnn,
        irmse: (isq_sum / fnn).sqrt(),
        count: n,
    })
}

/// Rank-based histogram equalization: map each value to its midrank,
/// rescaled to (0, 1). Ties share the average of their rank range, so the
/// transform is invariant under any strictly monotone re-parametrization of
/// the input.
fn equalize(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("NaN in series"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Midrank of the tie group [i, j], 1-based.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = (midrank - 0.5) / n as f64;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation between histogram-equalized absolute errors and
/// equalized negative log confidences.
///
/// A confidence that decreases monotonically with the error gives +1 (the
/// negative log flips the direction). Requires at least two distinct
/// values in each series.
pub fn conf_error_pearson(errors: &[f64], confidences: &[f64]) -> Result<f64> {
    if errors.len() != confidences.len() {
        return Err(Error::shape(format!(
            "{} errors vs {} confidences",
            errors.len(),
            confidences.len()
        )));
    }
    if errors.len() < 2 {
        return Err(Error::arg("need at least two samples"));
    }
    let abs_err: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    if abs_err.iter().all(|&e| e == abs_err[0]) {
        return Err(Error::ZeroVariance("errors"));
    }
    if confidences.iter().all(|&c| c == confidences[0]) {
        return Err(Error::ZeroVariance("confidences"));
    }
    let neg_log_c: Vec<f64> = confidences.iter().map(|&c| -c.ln()).collect();
    let x = equalize(&abs_err);
    let y = equalize(&neg_log_c);

    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(&y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::ZeroVariance("equalized series"));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}
