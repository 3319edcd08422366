//! Seeded Monte Carlo experiments over the simulation models.
//!
//! A run draws one stream per replication (seed `seed_base + rep`), feeds the
//! same batches to every configured method, and records the estimate,
//! interval coverage, test decision and update time after every batch.
//! Replications run on the rayon pool; results are collected in replication
//! order so the aggregated metrics do not depend on scheduling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OgmmError, Result};
use crate::estimator::{with_model_bandwidth, ImplicitConfig, OgmmState, UpdateOptions, WeightingMode};
use crate::inference::{anomaly_tf, anomaly_tr, anomaly_tu, linear_interval, sargan_hansen, AnomalySnapshot, TestReport};
use crate::linalg::{spd_inverse, symmetrize, Matrix, SpdFactor, Vector};
use crate::lrv::{BartlettConfig, KernelLrvConfig};
use crate::model::{Batch, MomentModel};
use crate::moments::Leqr;
use crate::offline::{initial_quantile_fit, moment_lrv, split_columns, tsls, twostep_gmm, LrvChoice, TwoStepOptions};
use crate::sgmm::{SgmmConfig, SgmmState, SgmmWeighting};
use crate::simgen::{Generator, SimModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    #[default]
    Explicit,
    Implicit,
}

fn one() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightingSpec {
    Welford,
    /// Kernel LRV; `pilot` defaults to the first batch size.
    Klrv {
        #[serde(default = "one_u32")]
        lambda: u32,
        #[serde(default = "one")]
        phi: f64,
        #[serde(default)]
        pilot: Option<u64>,
    },
}

impl Default for WeightingSpec {
    fn default() -> Self {
        WeightingSpec::Klrv { lambda: 1, phi: 1.0, pilot: None }
    }
}

impl WeightingSpec {
    fn kernel_config(&self, n1: u64) -> Option<KernelLrvConfig> {
        match *self {
            WeightingSpec::Welford => None,
            WeightingSpec::Klrv { lambda, phi, pilot } => Some(KernelLrvConfig::new(lambda, phi).with_pilot(pilot.unwrap_or(n1))),
        }
    }

    fn mode(&self, n1: u64) -> WeightingMode {
        match self.kernel_config(n1) {
            Some(cfg) => WeightingMode::KernelLrv(cfg),
            None => WeightingMode::Welford,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            WeightingSpec::Welford => "welford",
            WeightingSpec::Klrv { .. } => "klrv",
        }
    }
}

/// How the first-batch estimate is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSpec {
    /// 2SLS for models 1, 7, 8; two-step GMM for 2, 3, 4; smoothed quantile
    /// fit for 5, 6.
    #[default]
    Auto,
    Tsls,
    Gmm,
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyStatistic {
    Tf,
    Tu,
    Tr,
}

/// Reference data for the anomaly statistics: the first batch only, or the
/// first batch plus every later batch that was not flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceStrategy {
    #[default]
    Initial,
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MethodSpec {
    Ogmm {
        #[serde(default)]
        update: UpdateKind,
        #[serde(default)]
        weighting: WeightingSpec,
        #[serde(default)]
        init: InitSpec,
    },
    Sgmm {
        #[serde(default = "default_kappa")]
        kappa: f64,
        #[serde(default = "default_decay")]
        a: f64,
        /// Kernel LRV weighting instead of the inverse second moment.
        #[serde(default)]
        klrv: bool,
        #[serde(default)]
        init: InitSpec,
    },
    /// Offline two-step GMM on all data so far, Bartlett weighting.
    Gmm,
    /// Offline 2SLS on all data so far, Bartlett sandwich inference.
    Tsls,
    /// Interval-scheduled quantile estimator; `m` defaults to the first
    /// batch size.
    Leqr {
        #[serde(default)]
        m: Option<u64>,
    },
    Anomaly {
        statistic: AnomalyStatistic,
        #[serde(default)]
        strategy: ReferenceStrategy,
        #[serde(default)]
        weighting: WeightingSpec,
    },
}

fn default_kappa() -> f64 {
    crate::sgmm::DEFAULT_KAPPA
}

fn default_decay() -> f64 {
    crate::sgmm::DEFAULT_DECAY
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Ogmm { update, weighting, .. } => {
                let u = match update {
                    UpdateKind::Explicit => "explicit",
                    UpdateKind::Implicit => "implicit",
                };
                format!("ogmm-{u}-{}", weighting.label())
            }
            MethodSpec::Sgmm { kappa, klrv, .. } => format!("sgmm-k{kappa}{}", if *klrv { "-klrv" } else { "" }),
            MethodSpec::Gmm => "gmm".into(),
            MethodSpec::Tsls => "tsls".into(),
            MethodSpec::Leqr { .. } => "leqr".into(),
            MethodSpec::Anomaly { statistic, strategy, .. } => {
                let s = match statistic {
                    AnomalyStatistic::Tf => "tf",
                    AnomalyStatistic::Tu => "tu",
                    AnomalyStatistic::Tr => "tr",
                };
                let r = match strategy {
                    ReferenceStrategy::Initial => "initial",
                    ReferenceStrategy::Cumulative => "cumulative",
                };
                format!("{s}-{r}")
            }
        }
    }
}

/// Batch sizes of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Sizes(Vec<usize>),
    /// Cumulative sample sizes `N_1 < N_2 < …`.
    Checkpoints(Vec<u64>),
    /// `N_b = step · b` for `b = 1..=count`.
    Linear { step: usize, count: usize },
    /// `N_b = base · 2^b` for `b = 1..=count`.
    Doubling { base: usize, count: usize },
}

impl Schedule {
    pub fn sizes(&self) -> Result<Vec<usize>> {
        let sizes = match self {
            Schedule::Sizes(s) => s.clone(),
            Schedule::Checkpoints(c) => {
                let mut prev = 0;
                let mut out = Vec::with_capacity(c.len());
                for &n in c {
                    if n <= prev {
                        return Err(OgmmError::Config(format!("checkpoints must increase: {n} after {prev}")));
                    }
                    out.push((n - prev) as usize);
                    prev = n;
                }
                out
            }
            Schedule::Linear { step, count } => vec![*step; *count],
            Schedule::Doubling { base, count } => (1..=*count).map(|b| if b == 1 { 2 * base } else { base << (b - 1) }).collect(),
        };
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(OgmmError::Config("schedule needs at least one non-empty batch".into()));
        }
        Ok(sizes)
    }
}

/// Scalar summarized by MSE, MAE and coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Coord(usize),
    Sum,
}

impl Default for Target {
    fn default() -> Self {
        Target::Coord(0)
    }
}

impl Target {
    pub fn contrast(&self, p: usize) -> Result<Vector> {
        match *self {
            Target::Coord(i) if i < p => {
                let mut c = Vector::zeros(p);
                c[i] = 1.0;
                Ok(c)
            }
            Target::Coord(i) => Err(OgmmError::Config(format!("target coordinate {i} with p = {p}"))),
            Target::Sum => Ok(Vector::from_element(p, 1.0)),
        }
    }
}

fn default_alphas() -> Vec<f64> {
    vec![0.05]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: SimModel,
    pub methods: Vec<MethodSpec>,
    pub schedule: Schedule,
    pub replications: usize,
    #[serde(default)]
    pub seed_base: u64,
    /// The first level drives coverage and the recorded decisions.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub target: Target,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| OgmmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OgmmError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(OgmmError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.replications == 0 {
            return Err(OgmmError::Config("replications must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(OgmmError::Config("no methods configured".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(OgmmError::Config("alphas must be non-empty and inside (0, 1)".into()));
        }
        self.model.validate()?;
        self.schedule.sizes()?;
        self.target.contrast(self.model.param_dim())?;
        Ok(())
    }
}

/// Outcome of one method after one batch of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub method: String,
    /// 1-based batch index.
    pub batch: usize,
    pub n: u64,
    pub estimate: Vec<f64>,
    pub covered: Option<bool>,
    pub statistic: Option<f64>,
    pub df: Option<usize>,
    pub reject: Option<bool>,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: usize,
    pub seed: u64,
    pub method: String,
    pub batch: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub batch: usize,
    #[serde(rename = "N")]
    pub n: u64,
    pub reps_ok: usize,
    pub mse: f64,
    /// Median absolute error of the target.
    pub mae: f64,
    /// Median Euclidean error of the whole vector.
    pub mae_vec: f64,
    pub coverage: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub mean_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub records: Vec<RepRecord>,
    pub failures: Vec<Failure>,
    pub rows: Vec<MetricsRow>,
}

impl ExperimentResult {
    /// Records of one method at one batch, in replication order.
    pub fn select(&self, method: &str, batch: usize) -> impl Iterator<Item = &RepRecord> {
        let method = method.to_string();
        self.records.iter().filter(move |r| r.method == method && r.batch == batch)
    }

    /// Test statistics of one method at one batch.
    pub fn statistics(&self, method: &str, batch: usize) -> Vec<f64> {
        self.select(method, batch).filter_map(|r| r.statistic).collect()
    }

    pub fn row(&self, method: &str, batch: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.batch == batch)
    }

    /// Writes `<path>` (metrics CSV), `<stem>.records.csv` and the JSON
    /// sidecar `<stem>.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| OgmmError::Io(format!("{}: {e}", path.display()));
        let csv_err = |e: csv::Error| OgmmError::Io(e.to_string());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(io)?;

        let mut w = csv::Writer::from_path(path.with_extension("records.csv")).map_err(csv_err)?;
        w.write_record(["rep", "seed", "method", "batch", "N", "estimate", "covered", "statistic", "df", "reject", "time_s"])
            .map_err(csv_err)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.records {
            let est = r.estimate.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
            w.write_record([
                r.rep.to_string(),
                r.seed.to_string(),
                r.method.clone(),
                r.batch.to_string(),
                r.n.to_string(),
                est,
                opt(r.covered.map(|b| b.to_string())),
                opt(r.statistic.map(|v| format!("{v:?}"))),
                opt(r.df.map(|v| v.to_string())),
                opt(r.reject.map(|b| b.to_string())),
                format!("{:?}", r.time_s),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io)?;

        let sidecar = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "failures": self.failures,
            "environment": {
                "package_version": env!("CARGO_PKG_VERSION"),
                "os": std::env::consts::OS,
                "arch": std::env::consts::ARCH,
                "threads": rayon::current_num_threads(),
            },
        });
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| OgmmError::Io(e.to_string()))?;
        std::fs::write(path.with_extension("json"), text).map_err(io)
    }
}

struct Context<'a> {
    model: SimModel,
    moment: &'a dyn MomentModel,
    theta_star: Vector,
    c: Vector,
    alphas: &'a [f64],
}

impl Context<'_> {
    fn alpha(&self) -> f64 {
        self.alphas[0]
    }

    fn covers(&self, (lo, hi): (f64, f64)) -> bool {
        let t = self.c.dot(&self.theta_star);
        lo <= t && t <= hi
    }

    fn is_quantile(&self) -> bool {
        matches!(self.model, SimModel::M5 { .. } | SimModel::M6 { .. })
    }

    fn tau(&self) -> Result<f64> {
        match self.model {
            SimModel::M5 { tau } | SimModel::M6 { tau } => Ok(tau),
            _ => Err(OgmmError::BadParams(format!("{} is not a quantile model", self.model.name()))),
        }
    }

    fn resolve(&self, init: InitSpec) -> InitSpec {
        match (init, self.model) {
            (InitSpec::Auto, SimModel::M1 | SimModel::M7 { .. } | SimModel::M8 { .. }) => InitSpec::Tsls,
            (InitSpec::Auto, SimModel::M5 { .. } | SimModel::M6 { .. }) => InitSpec::Quantile,
            (InitSpec::Auto, _) => InitSpec::Gmm,
            (other, _) => other,
        }
    }

    fn tsls_fit(&self, batches: &[Batch]) -> Result<Vector> {
        if self.is_quantile() {
            return Err(OgmmError::BadParams("2SLS needs an instrumental-variables model".into()));
        }
        let (y, x, z) = split_columns(batches, self.model.param_dim(), self.model.moment_dim())?;
        tsls(&y, &x, &z)
    }

    fn initial(&self, init: InitSpec, first: &Batch) -> Result<Vector> {
        match self.resolve(init) {
            InitSpec::Tsls => self.tsls_fit(std::slice::from_ref(first)),
            InitSpec::Gmm => {
                let start = self.tsls_fit(std::slice::from_ref(first))?;
                Ok(twostep_gmm(self.moment, std::slice::from_ref(first), &TwoStepOptions::new(start))?.theta)
            }
            InitSpec::Quantile => {
                let (y, x, _) = split_columns(std::slice::from_ref(first), self.model.param_dim(), 0)?;
                initial_quantile_fit(&y, &x, self.tau()?)
            }
            InitSpec::Auto => unreachable!("resolved above"),
        }
    }
}

/// Per-batch outcome before it is stamped with replication data.
struct Step {
    n: u64,
    estimate: Vector,
    covered: Option<bool>,
    report: Option<TestReport>,
    time_s: f64,
}

fn ogmm_report(ctx: &Context, state: &OgmmState) -> (Option<bool>, Option<TestReport>) {
    let Some(sigma) = state.weighting().sigma() else { return (None, None) };
    let covered = linear_interval(state, &sigma, &ctx.c, ctx.alpha()).ok().map(|ci| ctx.covers(ci));
    let report = sargan_hansen(state, &sigma, ctx.alphas).ok();
    (covered, report)
}

fn run_ogmm(ctx: &Context, batches: &[Batch], update: UpdateKind, weighting: &WeightingSpec, init: InitSpec, out: &mut Vec<Step>) -> Result<()> {
    let first = &batches[0];
    let t0 = Instant::now();
    let theta1 = ctx.initial(init, first)?;
    let mut state = OgmmState::init(ctx.moment, first, theta1, weighting.mode(first.len() as u64), UpdateOptions::default())?;
    let mut time_s = t0.elapsed().as_secs_f64();
    for (b, batch) in batches.iter().enumerate() {
        if b > 0 {
            let t = Instant::now();
            match update {
                UpdateKind::Explicit => state.step(ctx.moment, batch)?,
                UpdateKind::Implicit => state.step_implicit(ctx.moment, batch, ImplicitConfig::default())?,
            }
            time_s = t.elapsed().as_secs_f64();
        }
        let (covered, report) = ogmm_report(ctx, &state);
        out.push(Step { n: state.n(), estimate: state.theta().clone(), covered, report, time_s });
    }
    Ok(())
}

fn run_sgmm(ctx: &Context, batches: &[Batch], cfg: &SgmmConfig, init: InitSpec, out: &mut Vec<Step>) -> Result<()> {
    let t0 = Instant::now();
    let first = with_model_bandwidth(ctx.moment, &batches[0], 0);
    let theta0 = ctx.initial(init, &first)?;
    let mut state = SgmmState::init(ctx.moment, &first, theta0, cfg)?;
    let mut time_s = t0.elapsed().as_secs_f64();
    let mut n = first.len() as u64;
    for (b, batch) in batches.iter().enumerate() {
        if b > 0 {
            let t = Instant::now();
            let batch = with_model_bandwidth(ctx.moment, batch, n);
            state.step_batch(ctx.moment, &batch)?;
            n += batch.len() as u64;
            time_s = t.elapsed().as_secs_f64();
        }
        let covered = state.linear_interval(&ctx.c, ctx.alpha()).ok().map(|ci| ctx.covers(ci));
        let report = state.overident(ctx.alphas).ok();
        out.push(Step { n, estimate: state.theta_bar().clone(), covered, report, time_s });
    }
    Ok(())
}

/// Sandwich interval and Hansen statistic for an offline estimate with
/// weighting `w` (`None` for the efficient `Σ⁻¹`).
fn offline_inference(ctx: &Context, theta: &Vector, batches: &[Batch], w: Option<&Matrix>) -> Result<(Option<bool>, Option<TestReport>)> {
    let n: usize = batches.iter().map(Batch::len).sum();
    let nf = n as f64;
    let sigma = moment_lrv(ctx.moment, theta, batches, &LrvChoice::Bartlett(BartlettConfig::default()))?;
    let (q, p) = (ctx.moment.moment_dim(), ctx.moment.param_dim());
    let mut g = Vector::zeros(q);
    let mut v = Matrix::zeros(q, p);
    for b in batches {
        let (gs, js) = ctx.moment.batch_sums(theta, b);
        g += gs;
        v += js;
    }
    g /= nf;
    v /= nf;
    let sigma_inv = spd_inverse(&sigma).ok_or_else(|| OgmmError::SingularSigma("offline Σ".into()))?;
    let w = w.cloned().unwrap_or_else(|| sigma_inv.clone());
    let bread = SpdFactor::new(&symmetrize(&(v.transpose() * &w * &v))).ok_or(OgmmError::RankDeficientV)?;
    let a = bread.solve_mat(&(v.transpose() * &w));
    let cov = symmetrize(&(&a * &sigma * a.transpose())) / nf;
    let half = crate::inference::normal_quantile(1.0 - ctx.alpha() / 2.0)? * (ctx.c.dot(&(&cov * &ctx.c))).max(0.0).sqrt();
    let center = ctx.c.dot(theta);
    let covered = Some(ctx.covers((center - half, center + half)));
    let report = if q > p { TestReport::new(nf * (g.transpose() * &sigma_inv * &g)[(0, 0)], q - p, ctx.alphas).ok() } else { None };
    Ok((covered, report))
}

fn run_offline(ctx: &Context, batches: &[Batch], gmm: bool, out: &mut Vec<Step>) -> Result<()> {
    let mut prev = Vector::zeros(ctx.model.param_dim());
    for b in 0..batches.len() {
        let data = &batches[..=b];
        let n: usize = data.iter().map(Batch::len).sum();
        let t = Instant::now();
        let (theta, w) = if gmm {
            let res = twostep_gmm(ctx.moment, data, &TwoStepOptions::new(prev.clone()))?;
            (res.theta, None)
        } else {
            let theta = ctx.tsls_fit(data)?;
            let (_, _, z) = split_columns(data, ctx.model.param_dim(), ctx.model.moment_dim())?;
            let zz = z.transpose() * &z / n as f64;
            (theta, Some(spd_inverse(&zz).ok_or_else(|| OgmmError::RankDeficient("instrument cross-product".into()))?))
        };
        let time_s = t.elapsed().as_secs_f64();
        let (covered, report) = offline_inference(ctx, &theta, data, w.as_ref())?;
        prev = theta.clone();
        out.push(Step { n: n as u64, estimate: theta, covered, report, time_s });
    }
    Ok(())
}

fn run_leqr(ctx: &Context, batches: &[Batch], m: Option<u64>, out: &mut Vec<Step>) -> Result<()> {
    let tau = ctx.tau()?;
    let first = &batches[0];
    let t0 = Instant::now();
    let theta0 = ctx.initial(InitSpec::Quantile, first)?;
    let mut leqr = Leqr::new(tau, m.unwrap_or(first.len() as u64), theta0);
    for batch in batches {
        let t = if leqr.count() == 0 { t0 } else { Instant::now() };
        leqr.push_batch(batch);
        let time_s = t.elapsed().as_secs_f64();
        out.push(Step { n: leqr.count(), estimate: leqr.estimate().clone(), covered: None, report: None, time_s });
    }
    Ok(())
}

fn run_anomaly(ctx: &Context, batches: &[Batch], stat: AnomalyStatistic, strategy: ReferenceStrategy, weighting: &WeightingSpec, out: &mut Vec<Step>) -> Result<()> {
    let first = &batches[0];
    let n1 = first.len() as u64;
    let t0 = Instant::now();
    let theta1 = ctx.tsls_fit(std::slice::from_ref(first))?;
    let mut reference = OgmmState::init(ctx.moment, first, theta1.clone(), weighting.mode(n1), UpdateOptions::default())?;
    let sigma_of = |s: &OgmmState| s.weighting().sigma().ok_or_else(|| OgmmError::SingularSigma("reference weighting has no variance estimate".into()));
    let mut snapshot = AnomalySnapshot::from_state(&reference, sigma_of(&reference)?)?;
    out.push(Step { n: n1, estimate: theta1.clone(), covered: None, report: None, time_s: t0.elapsed().as_secs_f64() });
    let mut fit = TwoStepOptions::new(theta1.clone());
    if let Some(cfg) = weighting.kernel_config(0) {
        fit.lrv = LrvChoice::KernelRecursive(cfg);
    }
    let mut seen = n1;
    for batch in &batches[1..] {
        seen += batch.len() as u64;
        let t = Instant::now();
        let (estimate, report, updated) = match stat {
            AnomalyStatistic::Tf => {
                let updated = reference.update(ctx.moment, batch)?;
                let r = anomaly_tf(&snapshot, &updated, ctx.moment, batch, ctx.alphas)?;
                (updated.theta().clone(), r, Some(updated))
            }
            AnomalyStatistic::Tu => {
                let r = anomaly_tu(&snapshot, ctx.moment, batch, &fit, ctx.alphas)?;
                let updated = if strategy == ReferenceStrategy::Cumulative { Some(reference.update(ctx.moment, batch)?) } else { None };
                (snapshot.theta1.clone(), r, updated)
            }
            AnomalyStatistic::Tr => {
                let r = anomaly_tr(ctx.moment, first, batch, &theta1, ctx.alphas)?;
                (r.theta, r.report, None)
            }
        };
        if strategy == ReferenceStrategy::Cumulative && report.rejects_at(ctx.alpha()) == Some(false) {
            if let Some(u) = updated {
                snapshot = AnomalySnapshot::from_state(&u, sigma_of(&u)?)?;
                reference = u;
            }
        }
        let time_s = t.elapsed().as_secs_f64();
        out.push(Step { n: seen, estimate, covered: None, report: Some(report), time_s });
    }
    Ok(())
}

fn run_method(ctx: &Context, spec: &MethodSpec, batches: &[Batch], out: &mut Vec<Step>) -> Result<()> {
    match spec {
        MethodSpec::Ogmm { update, weighting, init } => run_ogmm(ctx, batches, *update, weighting, *init, out),
        MethodSpec::Sgmm { kappa, a, klrv, init } => {
            let weighting = if *klrv {
                SgmmWeighting::KernelLrv(KernelLrvConfig::new(1, 1.0).with_pilot(batches[0].len() as u64))
            } else {
                SgmmWeighting::SecondMoment
            };
            let cfg = SgmmConfig { a: *a, kappa: *kappa, eta0: None, weighting };
            run_sgmm(ctx, batches, &cfg, *init, out)
        }
        MethodSpec::Gmm => run_offline(ctx, batches, true, out),
        MethodSpec::Tsls => run_offline(ctx, batches, false, out),
        MethodSpec::Leqr { m } => run_leqr(ctx, batches, *m, out),
        MethodSpec::Anomaly { statistic, strategy, weighting } => run_anomaly(ctx, batches, *statistic, *strategy, weighting, out),
    }
}

fn run_replication(cfg: &ExperimentConfig, sizes: &[usize], rep: usize) -> (Vec<RepRecord>, Vec<Failure>) {
    let seed = cfg.seed_base.wrapping_add(rep as u64);
    let moment = cfg.model.moment_model();
    let p = cfg.model.param_dim();
    let ctx = Context {
        model: cfg.model,
        moment: moment.as_ref(),
        theta_star: cfg.model.true_theta(),
        c: cfg.target.contrast(p).expect("validated"),
        alphas: &cfg.alphas,
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let batches = match Generator::new(cfg.model, seed).and_then(|mut g| g.batches(sizes)) {
        Ok(b) => b,
        Err(e) => {
            for spec in &cfg.methods {
                failures.push(Failure { rep, seed, method: spec.label(), batch: 0, error: e.to_string() });
            }
            return (records, failures);
        }
    };
    for spec in &cfg.methods {
        let label = spec.label();
        let mut steps = Vec::with_capacity(batches.len());
        let res = run_method(&ctx, spec, &batches, &mut steps);
        for (b, s) in steps.into_iter().enumerate() {
            let alpha = ctx.alpha();
            records.push(RepRecord {
                rep,
                seed,
                method: label.clone(),
                batch: b + 1,
                n: s.n,
                estimate: s.estimate.as_slice().to_vec(),
                covered: s.covered,
                statistic: s.report.as_ref().map(|r| r.statistic),
                df: s.report.as_ref().map(|r| r.df),
                reject: s.report.as_ref().and_then(|r| r.rejects_at(alpha)),
                time_s: s.time_s,
            });
        }
        if let Err(e) = res {
            let done = records.iter().filter(|r| r.method == label).count();
            failures.push(Failure { rep, seed, method: label, batch: done + 1, error: e.to_string() });
        }
    }
    (records, failures)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn rate(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for f in flags.flatten() {
        total += 1;
        hit += f as usize;
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Aggregates records per method and batch, in configuration order.
pub fn aggregate(cfg: &ExperimentConfig, records: &[RepRecord]) -> Result<Vec<MetricsRow>> {
    let p = cfg.model.param_dim();
    let c = cfg.target.contrast(p)?;
    let star = cfg.model.true_theta();
    let target = c.dot(&star);
    let sizes = cfg.schedule.sizes()?;
    let mut rows = Vec::new();
    for spec in &cfg.methods {
        let label = spec.label();
        for b in 1..=sizes.len() {
            let sel: Vec<&RepRecord> = records.iter().filter(|r| r.method == label && r.batch == b).collect();
            if sel.is_empty() {
                continue;
            }
            let errs: Vec<f64> = sel.iter().map(|r| r.estimate.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>() - target).collect();
            let mut abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
            let mut vec_err: Vec<f64> = sel
                .iter()
                .map(|r| r.estimate.iter().zip(star.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            rows.push(MetricsRow {
                method: label.clone(),
                batch: b,
                n: sel[0].n,
                reps_ok: sel.len(),
                mse: errs.iter().map(|e| e * e).sum::<f64>() / sel.len() as f64,
                mae: median(&mut abs),
                mae_vec: median(&mut vec_err),
                coverage: rate(sel.iter().map(|r| r.covered)),
                rejection_rate: rate(sel.iter().map(|r| r.reject)),
                mean_time_s: sel.iter().map(|r| r.time_s).sum::<f64>() / sel.len() as f64,
            });
        }
    }
    Ok(rows)
}

/// Runs every replication and aggregates. Per-replication failures are
/// recorded, not propagated.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let sizes = cfg.schedule.sizes()?;
    let per_rep: Vec<(Vec<RepRecord>, Vec<Failure>)> =
        (0..cfg.replications).into_par_iter().map(|rep| run_replication(cfg, &sizes, rep)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_rep {
        records.extend(r);
        failures.extend(f);
    }
    let rows = aggregate(cfg, &records)?;
    Ok(ExperimentResult { config: cfg.clone(), records, failures, rows })
}
