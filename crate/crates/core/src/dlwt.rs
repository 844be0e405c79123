//! Dynamic loss-weight tuning: a four-branch controller that moves the
//! image-loss weight and the watermark-loss weight from the current PSNR and
//! bit accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlwtConfig {
    /// Target PSNR in dB.
    pub rho: f64,
    /// Target bit accuracy.
    pub mu: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for DlwtConfig {
    fn default() -> Self {
        DlwtConfig { rho: 30.0, mu: 0.95, gamma: 0.1, eta: 1.0 }
    }
}

impl DlwtConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0 && self.mu > 0.0 && self.mu <= 1.0 && self.gamma > 0.0 && self.eta > 0.0;
        if !ok || ![self.rho, self.mu, self.gamma, self.eta].iter().all(|v| v.is_finite()) {
            return Err(invalid!("controller config out of range: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DlwtState {
    pub lambda_i: f64,
    pub lambda_w: f64,
}

impl Default for DlwtState {
    fn default() -> Self {
        DlwtState { lambda_i: 1.0, lambda_w: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    /// Quality above target, accuracy below: raise the watermark weight.
    RaiseWatermark = 1,
    /// Quality below target, accuracy met: raise the image weight.
    RaiseImage = 2,
    /// Both below target: raise both in proportion to the shortfall.
    RaiseBoth = 3,
    /// Otherwise: decay both towards zero.
    Decay = 4,
}

impl Branch {
    pub fn id(self) -> u8 {
        self as u8
    }
}

/// One controller update. Ties on either threshold fall through to
/// [`Branch::Decay`].
pub fn dlwt_step(state: DlwtState, rho_t: f64, mu_t: f64, cfg: &DlwtConfig) -> Result<(DlwtState, Branch)> {
    if rho_t.is_nan() || mu_t.is_nan() {
        return Err(invalid!("controller inputs must not be NaN"));
    }
    if !(0.0..=1.0).contains(&mu_t) {
        return Err(invalid!("accuracy {mu_t} outside [0, 1]"));
    }
    cfg.validate()?;
    let d_rho = cfg.rho - rho_t;
    let d_mu = cfg.mu - mu_t;
    let DlwtState { mut lambda_i, mut lambda_w } = state;
    let branch = if rho_t > cfg.rho && mu_t < cfg.mu {
        lambda_w += cfg.gamma;
        Branch::RaiseWatermark
    } else if rho_t < cfg.rho && mu_t >= cfg.mu {
        lambda_i += cfg.gamma;
        Branch::RaiseImage
    } else if rho_t < cfg.rho && mu_t < cfg.mu {
        lambda_i += cfg.gamma * (d_rho / cfg.rho);
        lambda_w += cfg.gamma * (d_mu / cfg.mu);
        Branch::RaiseBoth
    } else {
        lambda_i = (lambda_i - cfg.eta * cfg.gamma).max(0.0);
        lambda_w = (lambda_w - cfg.eta * cfg.gamma).max(0.0);
        Branch::Decay
    };
    Ok((DlwtState { lambda_i, lambda_w }, branch))
}

/// Controller steps needed for both weights to decay to zero once targets
/// stay met.
pub fn decay_steps_bound(state: DlwtState, cfg: &DlwtConfig) -> usize {
    (state.lambda_i.max(state.lambda_w) / (cfg.eta * cfg.gamma)).ceil() as usize
}
