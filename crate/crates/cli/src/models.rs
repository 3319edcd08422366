use ogmm_core::offline::{initial_quantile_fit, ols, split_columns, tsls};
use ogmm_core::{Batch, IvMoment, MomentModel, OlsMoment, SimModel, SmoothedQuantileMoment, Vector};

use crate::error::CliError;
use crate::input::Layout;

/// A moment model resolved from `--model` and the input header.
pub enum ModelKind {
    Ols { p: usize },
    Iv { p: usize, q: usize },
    Quantile { p: usize, tau: f64 },
    Sim(SimModel),
}

impl ModelKind {
    pub fn resolve(name: &str, theta2: Option<f64>, tau: Option<f64>, layout: Layout) -> Result<Self, CliError> {
        let kind = match name.to_ascii_lowercase().as_str() {
            "ols" => ModelKind::Ols { p: layout.p },
            "iv" => ModelKind::Iv { p: layout.p, q: layout.q },
            "quantile" => {
                let tau = tau.ok_or_else(|| CliError::Usage("--model quantile needs --tau".into()))?;
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(CliError::Usage(format!("--tau {tau} outside (0, 1)")));
                }
                ModelKind::Quantile { p: layout.p, tau }
            }
            other => ModelKind::Sim(sim_model(other, theta2, tau)?),
        };
        kind.check_layout(layout)?;
        Ok(kind)
    }

    fn check_layout(&self, layout: Layout) -> Result<(), CliError> {
        let (p, q) = match self {
            ModelKind::Ols { p } | ModelKind::Quantile { p, .. } => (*p, 0),
            ModelKind::Iv { p, q } => {
                if q < p {
                    return Err(CliError::Input(format!("iv model needs at least as many instruments as regressors, got {q} < {p}")));
                }
                (*p, *q)
            }
            ModelKind::Sim(m) => {
                let z = m.columns().iter().filter(|c| c.starts_with('z')).count();
                (m.columns().len() - 1 - z, z)
            }
        };
        if (p, q) != (layout.p, layout.q) {
            return Err(CliError::Input(format!(
                "header has {} regressors and {} instruments, model expects {p} and {q}",
                layout.p, layout.q
            )));
        }
        Ok(())
    }

    pub fn moment(&self) -> Box<dyn MomentModel> {
        match self {
            ModelKind::Ols { p } => Box::new(OlsMoment::new(*p)),
            ModelKind::Iv { p, q } => Box::new(IvMoment::new(*p, *q)),
            ModelKind::Quantile { p, tau } => Box::new(SmoothedQuantileMoment::new(*p, *tau)),
            ModelKind::Sim(m) => m.moment_model(),
        }
    }

    /// First-batch estimate: least squares, 2SLS or the smoothed quantile
    /// fit, depending on the model.
    pub fn initial(&self, first: &[Batch]) -> Result<Vector, CliError> {
        let out = match self {
            ModelKind::Ols { p } => {
                let (y, x, _) = split_columns(first, *p, 0)?;
                ols(&y, &x)?
            }
            ModelKind::Iv { p, q } => {
                let (y, x, z) = split_columns(first, *p, *q)?;
                tsls(&y, &x, &z)?
            }
            ModelKind::Quantile { p, tau } => {
                let (y, x, _) = split_columns(first, *p, 0)?;
                initial_quantile_fit(&y, &x, *tau)?
            }
            ModelKind::Sim(m @ (SimModel::M5 { tau } | SimModel::M6 { tau })) => {
                let (y, x, _) = split_columns(first, m.param_dim(), 0)?;
                initial_quantile_fit(&y, &x, *tau)?
            }
            ModelKind::Sim(m) => {
                let (y, x, z) = split_columns(first, m.param_dim(), m.moment_dim())?;
                tsls(&y, &x, &z)?
            }
        };
        Ok(out)
    }
}

pub fn sim_model(name: &str, theta2: Option<f64>, tau: Option<f64>) -> Result<SimModel, CliError> {
    let extra = match name {
        "m5" | "m6" => tau,
        _ => theta2,
    };
    if !matches!(name, "m1" | "m2" | "m3" | "m4" | "m5" | "m6" | "m7" | "m8") {
        return Err(CliError::Usage(format!("unknown model `{name}`; expected ols, iv, quantile or m1..m8")));
    }
    Ok(SimModel::from_name(name, extra)?)
}
