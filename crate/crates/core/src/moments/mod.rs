//! Concrete moment models.

mod gmwm;
mod linear;
mod quantile;

pub use gmwm::{gmwm_nu, gmwm_nu_gradient, haar_ar1_variance, GmwmMoment, GMWM_RHO_BOUNDS, GMWM_VAR_BOUNDS};
pub use linear::{IvMoment, OlsMoment};
pub use quantile::{smooth_indicator, smooth_indicator_deriv, Leqr, SmoothedQuantileMoment};
