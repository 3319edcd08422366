use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use ogmm_core::estimator::with_model_bandwidth;
use ogmm_core::inference::{anomaly_tf, anomaly_tr, anomaly_tu, marginal_interval, sargan_hansen};
use ogmm_core::offline::{LrvChoice, TwoStepOptions};
use ogmm_core::sgmm::SgmmWeighting;
use ogmm_core::simgen::write_csv;
use ogmm_core::{
    run_experiment, AnomalySnapshot, Batch, ExperimentConfig, Generator, ImplicitConfig, KernelLrvConfig, Matrix,
    MomentModel, OgmmError, OgmmState, SgmmConfig, SgmmState, TestReport, UpdateOptions, Vector, WeightingMode,
};

use crate::error::CliError;
use crate::input;
use crate::models::{sim_model, ModelKind};
use crate::{
    BenchArgs, EstimateArgs, MethodArg, ModelArgs, ReplayArgs, SimulateArgs, StatisticArg, StreamArgs, TestArgs,
    WeightArgs, WeightingArg,
};

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) if p.as_os_str() == "-" => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) => {
            let f = File::create(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn load(model: &ModelArgs, stream: &StreamArgs) -> Result<(ModelKind, Vec<Batch>), CliError> {
    let (reader, source) = input::open(stream.input.as_deref())?;
    let table = input::read_table(reader, &source)?;
    let layout = input::layout(&table.columns)?;
    let kind = ModelKind::resolve(&model.model, model.theta2, model.tau, layout)?;
    let size = stream.batch_size.unwrap_or(table.rows.len());
    let first = stream.first_batch.unwrap_or(size);
    let batches = input::batches(&table.rows, first, size, stream.batches)?;
    Ok((kind, batches))
}

fn kernel_config(w: &WeightArgs, pilot: u64) -> Result<KernelLrvConfig, CliError> {
    let cfg = KernelLrvConfig::new(w.lambda, w.phi).with_pilot(w.pilot.unwrap_or(pilot));
    cfg.validate()?;
    Ok(cfg)
}

fn weighting_mode(w: &WeightArgs, q: usize, n1: u64) -> Result<WeightingMode, CliError> {
    Ok(match w.weighting {
        WeightingArg::Fixed => WeightingMode::Fixed(Matrix::identity(q, q)),
        WeightingArg::Welford => WeightingMode::Welford,
        WeightingArg::Klrv => WeightingMode::KernelLrv(kernel_config(w, n1)?),
    })
}

/// Per-batch table shared by `estimate` and `replay`.
struct EstimateTable {
    out: csv::Writer<Box<dyn Write>>,
    p: usize,
}

impl EstimateTable {
    fn new(path: Option<&Path>, p: usize) -> Result<Self, CliError> {
        let mut out = csv::Writer::from_writer(output(path)?);
        let mut header = vec!["batch".to_string(), "N".to_string()];
        for prefix in ["theta", "lo", "hi"] {
            header.extend((1..=p).map(|j| format!("{prefix}_{j}")));
        }
        header.extend(["j_stat", "j_df", "j_pvalue"].map(String::from));
        out.write_record(&header)?;
        Ok(Self { out, p })
    }

    fn row(
        &mut self,
        batch: u64,
        n: u64,
        theta: &Vector,
        intervals: &[Option<(f64, f64)>],
        report: Option<&TestReport>,
    ) -> Result<(), CliError> {
        let mut rec = vec![batch.to_string(), n.to_string()];
        rec.extend(theta.iter().map(|&v| num(v)));
        rec.extend((0..self.p).map(|j| intervals.get(j).copied().flatten().map_or(String::new(), |ci| num(ci.0))));
        rec.extend((0..self.p).map(|j| intervals.get(j).copied().flatten().map_or(String::new(), |ci| num(ci.1))));
        match report {
            Some(r) => rec.extend([num(r.statistic), r.df.to_string(), num(r.p_value)]),
            None => rec.extend([String::new(), String::new(), String::new()]),
        }
        self.out.write_record(&rec)?;
        Ok(())
    }

    fn ogmm_row(&mut self, state: &OgmmState, alpha: f64) -> Result<(), CliError> {
        let sigma = state.weighting().sigma();
        let intervals: Vec<_> = (0..self.p)
            .map(|j| sigma.as_ref().and_then(|s| marginal_interval(state, s, j, alpha).ok()))
            .collect();
        let (q, p) = state.v_prime().shape();
        let report = if q > p { sigma.as_ref().and_then(|s| sargan_hansen(state, s, &[alpha]).ok()) } else { None };
        self.row(state.batch_index(), state.n(), state.theta(), &intervals, report.as_ref())
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.out.flush()?;
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--alpha {alpha} outside (0, 1)")))
    }
}

fn save_snapshot(state: &OgmmState, path: Option<&Path>) -> Result<(), CliError> {
    if let Some(p) = path {
        std::fs::write(p, state.to_snapshot()?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let model = sim_model(&a.model.model.to_ascii_lowercase(), a.model.theta2, a.model.tau)?;
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let columns = model.columns();
    let mut gen = Generator::new(model, a.seed)?;
    let batches = gen.batches(&vec![a.batch_size; a.batches])?;
    write_csv(output(a.out.as_deref())?, &columns, &batches)?;
    Ok(())
}

pub fn estimate(a: &EstimateArgs) -> Result<(), CliError> {
    check_alpha(a.alpha)?;
    let (kind, batches) = load(&a.model, &a.stream)?;
    let model = kind.moment();
    let p = model.param_dim();
    let theta1 = kind.initial(&batches[..1])?;
    let n1 = batches[0].len() as u64;
    if a.method == MethodArg::Sgmm {
        if a.snapshot.is_some() {
            return Err(CliError::Usage("--snapshot is only available for the OGMM methods".into()));
        }
        let weighting = match a.weight.weighting {
            WeightingArg::Fixed => return Err(CliError::Usage("sgmm does not support --weighting fixed".into())),
            WeightingArg::Welford => SgmmWeighting::SecondMoment,
            WeightingArg::Klrv => SgmmWeighting::KernelLrv(kernel_config(&a.weight, n1)?),
        };
        let cfg = SgmmConfig { kappa: a.kappa, weighting, ..SgmmConfig::default() };
        return run_sgmm(model.as_ref(), &batches, theta1, &cfg, a);
    }
    let mode = weighting_mode(&a.weight, model.moment_dim(), n1)?;
    let mut state = OgmmState::init(model.as_ref(), &batches[0], theta1, mode, UpdateOptions::default())?;
    let mut table = EstimateTable::new(a.out.as_deref(), p)?;
    table.ogmm_row(&state, a.alpha)?;
    for b in &batches[1..] {
        match a.method {
            MethodArg::OgmmImplicit => state.step_implicit(model.as_ref(), b, ImplicitConfig::default())?,
            _ => state.step(model.as_ref(), b)?,
        }
        table.ogmm_row(&state, a.alpha)?;
    }
    table.finish()?;
    save_snapshot(&state, a.snapshot.as_deref())
}

fn run_sgmm(model: &dyn MomentModel, batches: &[Batch], theta0: Vector, cfg: &SgmmConfig, a: &EstimateArgs) -> Result<(), CliError> {
    let p = model.param_dim();
    let first = with_model_bandwidth(model, &batches[0], 0);
    let mut state = SgmmState::init(model, &first, theta0, cfg)?;
    let mut n = first.len() as u64;
    let mut table = EstimateTable::new(a.out.as_deref(), p)?;
    for (i, batch) in batches.iter().enumerate() {
        if i > 0 {
            let batch = with_model_bandwidth(model, batch, n);
            state.step_batch(model, &batch)?;
            n += batch.len() as u64;
        }
        let intervals: Vec<_> = (0..p).map(|j| state.marginal_interval(j, a.alpha).ok()).collect();
        let report = if model.moment_dim() > p { state.overident(&[a.alpha]).ok() } else { None };
        table.row(i as u64 + 1, n, state.theta_bar(), &intervals, report.as_ref())?;
    }
    table.finish()
}

pub fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    check_alpha(a.alpha)?;
    let text = std::fs::read_to_string(&a.from).map_err(|e| CliError::Input(format!("{}: {e}", a.from.display())))?;
    let mut state = OgmmState::from_snapshot(&text)?;
    let (kind, batches) = load(&a.model, &a.stream)?;
    let model = kind.moment();
    let (q, p) = state.v_prime().shape();
    if (q, p) != (model.moment_dim(), model.param_dim()) {
        return Err(CliError::Input(format!(
            "snapshot has {p} parameters and {q} moments, model has {} and {}",
            model.param_dim(),
            model.moment_dim()
        )));
    }
    let mut table = EstimateTable::new(a.out.as_deref(), p)?;
    for b in &batches {
        state.step(model.as_ref(), b)?;
        table.ogmm_row(&state, a.alpha)?;
    }
    table.finish()?;
    save_snapshot(&state, a.snapshot.as_deref())
}

pub fn test(a: &TestArgs) -> Result<(), CliError> {
    check_alpha(a.alpha)?;
    let (kind, batches) = load(&a.model, &a.stream)?;
    let model = kind.moment();
    let (q, p) = (model.moment_dim(), model.param_dim());
    let alphas = [a.alpha];
    if a.reference_batches == 0 || a.reference_batches > batches.len() {
        return Err(CliError::Usage(format!(
            "--reference-batches must be between 1 and the number of batches ({})",
            batches.len()
        )));
    }
    if a.weight.weighting == WeightingArg::Fixed && a.statistic != StatisticArg::Tr {
        return Err(CliError::Usage("this statistic needs an estimated variance; use --weighting welford or klrv".into()));
    }
    if q == p {
        return Err(OgmmError::ExactIdentification.into());
    }
    let mut out = csv::Writer::from_writer(output(a.out.as_deref())?);
    out.write_record(["batch", "N", "statistic", "df", "p_value", "reject"])?;
    let mut write = |batch: u64, n: u64, r: &TestReport| -> Result<(), CliError> {
        let reject = r.rejects_at(a.alpha).map_or(String::new(), |b| b.to_string());
        out.write_record([batch.to_string(), n.to_string(), num(r.statistic), r.df.to_string(), num(r.p_value), reject])?;
        Ok(())
    };
    let sigma_of = |s: &OgmmState| {
        s.weighting().sigma().ok_or_else(|| OgmmError::SingularSigma("weighting has no variance estimate yet".into()))
    };

    if a.statistic == StatisticArg::Sargan {
        let n1 = batches[0].len() as u64;
        let theta1 = kind.initial(&batches[..1])?;
        let mode = weighting_mode(&a.weight, q, n1)?;
        let mut state = OgmmState::init(model.as_ref(), &batches[0], theta1, mode, UpdateOptions::default())?;
        write(1, state.n(), &sargan_hansen(&state, &sigma_of(&state)?, &alphas)?)?;
        for b in &batches[1..] {
            state.step(model.as_ref(), b)?;
            write(state.batch_index(), state.n(), &sargan_hansen(&state, &sigma_of(&state)?, &alphas)?)?;
        }
    } else {
        let k = a.reference_batches;
        let first = Batch::concat(&batches[..k])?;
        let n1 = first.len() as u64;
        let theta1 = kind.initial(std::slice::from_ref(&first))?;
        let mode = weighting_mode(&a.weight, q, n1)?;
        let reference = OgmmState::init(model.as_ref(), &first, theta1.clone(), mode, UpdateOptions::default())?;
        let snapshot = match a.statistic {
            StatisticArg::Tr => None,
            _ => Some(AnomalySnapshot::from_state(&reference, sigma_of(&reference)?)?),
        };
        let mut fit = TwoStepOptions::new(theta1.clone());
        if a.weight.weighting == WeightingArg::Klrv {
            fit.lrv = LrvChoice::KernelRecursive(kernel_config(&a.weight, 0)?);
        }
        let mut seen = n1;
        for (i, batch) in batches[k..].iter().enumerate() {
            seen += batch.len() as u64;
            let report = match (a.statistic, &snapshot) {
                (StatisticArg::Tf, Some(snap)) => {
                    let updated = reference.update(model.as_ref(), batch)?;
                    anomaly_tf(snap, &updated, model.as_ref(), batch, &alphas)?
                }
                (StatisticArg::Tu, Some(snap)) => anomaly_tu(snap, model.as_ref(), batch, &fit, &alphas)?,
                _ => anomaly_tr(model.as_ref(), &first, batch, &theta1, &alphas)?.report,
            };
            write((k + i + 1) as u64, seen, &report)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::from_path(&a.config)?;
    if let Some(r) = a.reps {
        cfg.replications = r;
    }
    if let Some(s) = a.seed {
        cfg.seed_base = s;
    }
    cfg.validate()?;
    let result = run_experiment(&cfg)?;
    let stdout = io::stdout();
    let mut w = csv::Writer::from_writer(stdout.lock());
    for row in &result.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    for f in &result.failures {
        eprintln!("rep {} (seed {}) {} batch {}: {}", f.rep, f.seed, f.method, f.batch, f.error);
    }
    if let Some(path) = a.out.as_deref().or(cfg.output.as_deref()) {
        result.write(path)?;
    }
    Ok(())
}
