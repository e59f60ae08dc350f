//! Subcommand drivers. Every command reads the effective config, derives all
//! randomness from its seed and writes artifacts into the output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use stad_core::dynamics::{AnalyticMixtureField, ScheduleSpec, ScoreNetField, VelocityField, VelocityNetField};
use stad_core::net::{Checkpoint, CheckpointMeta};
use stad_core::odelik::{
    likelihood_solver, log_likelihood_batch, residual_histogram, summarize, write_histogram_csv, write_metrics_csv, BackendKind,
    DivergenceBackend, LikelihoodReport, MetricsRow,
};
use stad_core::rng::derive_key;
use stad_core::stad::{distill, DistillReport, LearnedHead};
use stad_core::targets::{Dataset, TargetDensity};
use stad_core::trace::{random_matrix_benchmark, write_bench_csv};
use stad_core::train::{train_direct_divergence, train_flow_cfm, train_score_dsm, DirectMode, TrainReport};

use crate::config::{Config, TeacherKind};
use crate::exit::{CliError, ExitKind};

/// Seed tags separating the independent random streams of a run.
mod stream {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const INIT: u64 = 3;
    pub const OPTIMIZE: u64 = 4;
    pub const LIKELIHOOD: u64 = 5;
}

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const HEAD_FILE: &str = "head.ckpt";

pub struct Run {
    pub cfg: Config,
    pub seed: u64,
    pub out: PathBuf,
}

/// Target and data in the coordinates every model of the run works in.
struct Problem {
    target: TargetDensity,
    train: Dataset,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    /// Record the config this command actually ran with.
    pub fn write_effective_config(&self, command: &str) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)?;
        let mut cfg = self.cfg.clone();
        cfg.seed = Some(self.seed);
        let mut w = self.create(&format!("{command}.config.json"))?;
        serde_json::to_writer_pretty(&mut w, &cfg).map_err(|e| CliError::new(ExitKind::Other, e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    fn problem(&self) -> Result<Problem, CliError> {
        let target = self.cfg.target.build(self.seed)?;
        let train = target.sample(self.cfg.target.n_train, derive_key(self.seed, &[stream::TRAIN_DATA]));
        if !self.cfg.target.normalize {
            return Ok(Problem { target, train });
        }
        let (train, norm) = train.normalize()?;
        Ok(Problem {
            target: target.normalized(&norm)?,
            train,
        })
    }

    fn teacher_path(&self) -> PathBuf {
        self.cfg.teacher.net.checkpoint.clone().unwrap_or_else(|| self.path(TEACHER_FILE))
    }

    fn teacher(&self, problem: &Problem) -> Result<Box<dyn VelocityField>, CliError> {
        let sched = self.cfg.schedule;
        if self.cfg.teacher.kind == TeacherKind::Analytic {
            return Ok(Box::new(AnalyticMixtureField::new(Arc::new(problem.target.clone()), sched)));
        }
        let ck = load_checkpoint(&self.teacher_path())?;
        if let Some(kind) = ck.extras.get("teacher_kind") {
            let kind: TeacherKind = serde_json::from_value(kind.clone()).map_err(|e| CliError::new(ExitKind::ShapeMismatch, e.to_string()))?;
            if kind != self.cfg.teacher.kind {
                return Err(CliError::new(
                    ExitKind::ShapeMismatch,
                    format!("checkpoint holds a {kind:?} teacher, config asks for {:?}", self.cfg.teacher.kind),
                ));
            }
        }
        check_shape(&ck, problem.target.dim, problem.target.dim, problem.target.context_dim)?;
        let sched: ScheduleSpec = match &ck.schedule {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::new(ExitKind::ShapeMismatch, e.to_string()))?,
            None => sched,
        };
        let net = Arc::new(ck.net);
        Ok(match self.cfg.teacher.kind {
            TeacherKind::ScoreNet => Box::new(ScoreNetField::new(net, sched)?),
            _ => Box::new(VelocityNetField::new(net, sched)?),
        })
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::new(ExitKind::MissingInput, format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn check_shape(ck: &Checkpoint, input: usize, output: usize, context: usize) -> Result<(), CliError> {
    let net = &ck.net;
    if net.input_dim() != input || net.output_dim() != output || net.context_dim() != context {
        return Err(CliError::new(
            ExitKind::ShapeMismatch,
            format!(
                "checkpoint maps R^{} (context {}) to R^{}, config needs R^{input} (context {context}) to R^{output}",
                net.input_dim(),
                net.context_dim(),
                net.output_dim()
            ),
        ));
    }
    Ok(())
}

fn write_loss_csv(curve: &[f64], mut w: impl Write) -> Result<(), CliError> {
    writeln!(w, "step,loss")?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(w, "{i},{l:.9e}")?;
    }
    Ok(())
}

fn write_json(run: &Run, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = run.create(name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::new(ExitKind::Other, e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

pub fn bench_trace(run: &Run) -> Result<(), CliError> {
    let rows = random_matrix_benchmark(&run.cfg.bench.to_bench(run.seed)?)?;
    write_bench_csv(&rows, run.create("bench_trace.csv")?)?;
    for r in &rows {
        println!("{:<10} D={:<4} m={:<4} mae {:.4e}", r.estimator.to_string(), r.dim, r.m, r.mae);
    }
    Ok(())
}

fn save_teacher(run: &Run, net: stad_core::net::FieldNet, rep: &TrainReport, kind: TeacherKind) -> Result<(), CliError> {
    let mut ck = Checkpoint::new(
        net,
        CheckpointMeta {
            seed: run.seed,
            steps: rep.steps as u64,
            final_loss: Some(rep.final_loss),
        },
    );
    ck.schedule = Some(serde_json::to_value(run.cfg.schedule).expect("schedule serializes"));
    ck.extras = serde_json::json!({ "teacher_kind": kind });
    ck.save(run.path(TEACHER_FILE))?;
    write_loss_csv(&rep.loss_curve, run.create("train_loss.csv")?)?;
    write_json(run, "train_report.json", rep)?;
    println!("trained {} steps in {:.1}s, final loss {:.5}", rep.steps, rep.wall_time_s, rep.final_loss);
    if let Some(step) = rep.aborted_at {
        return Err(CliError::new(ExitKind::NumericalAbort, format!("training aborted at step {step}; last good model saved")));
    }
    Ok(())
}

pub fn train_score(run: &Run) -> Result<(), CliError> {
    let p = run.problem()?;
    let t = &run.cfg.teacher;
    let net = t.net.build(p.target.dim, p.target.dim, p.target.context_dim, derive_key(run.seed, &[stream::INIT]))?;
    let (net, rep) = train_score_dsm(net, &p.train, &run.cfg.schedule, &t.train, derive_key(run.seed, &[stream::OPTIMIZE]))?;
    save_teacher(run, net, &rep, TeacherKind::ScoreNet)
}

pub fn train_flow(run: &Run) -> Result<(), CliError> {
    let p = run.problem()?;
    let t = &run.cfg.teacher;
    let net = t.net.build(p.target.dim, p.target.dim, p.target.context_dim, derive_key(run.seed, &[stream::INIT]))?;
    let (net, rep) = train_flow_cfm(net, &p.train, &run.cfg.schedule, &t.train, derive_key(run.seed, &[stream::OPTIMIZE]))?;
    save_teacher(run, net, &rep, TeacherKind::VelocityNet)
}

fn save_head(run: &Run, file: &str, head: &LearnedHead, rep: &DistillReport) -> Result<(), CliError> {
    let mut ck = Checkpoint::new(
        (*head.net).clone(),
        CheckpointMeta {
            seed: run.seed,
            steps: rep.steps as u64,
            final_loss: Some(rep.final_loss),
        },
    );
    ck.schedule = Some(serde_json::to_value(run.cfg.schedule).expect("schedule serializes"));
    ck.extras = head.extras();
    ck.save(run.path(file))?;
    let stem = file.trim_end_matches(".ckpt");
    write_loss_csv(&rep.loss_curve, run.create(&format!("{stem}_loss.csv"))?)?;
    write_json(run, &format!("{stem}_report.json"), rep)?;
    println!(
        "{stem}: {} steps, cache {:.1}s, train {:.1}s, final loss {:.5}",
        rep.steps, rep.wall_time_cache_s, rep.wall_time_train_s, rep.final_loss
    );
    if let Some(step) = rep.aborted_at {
        return Err(CliError::new(ExitKind::NumericalAbort, format!("distillation aborted at step {step}; last good head saved")));
    }
    Ok(())
}

pub fn distill_head(run: &Run) -> Result<(), CliError> {
    let p = run.problem()?;
    let field = run.teacher(&p)?;
    let head = run.cfg.head.build(p.target.dim, 1, p.target.context_dim, derive_key(run.seed, &[stream::INIT, 1]))?;
    let (head, rep) = distill(field.as_ref(), &p.train, head, &run.cfg.distill, derive_key(run.seed, &[stream::OPTIMIZE, 1]))?;
    save_head(run, HEAD_FILE, &head, &rep)
}

pub fn direct_head_file(mode: DirectMode) -> &'static str {
    match mode {
        DirectMode::H1 => "direct_h1.ckpt",
        DirectMode::H1PlusB => "direct_h1b.ckpt",
    }
}

pub fn direct_distill(run: &Run, mode: DirectMode) -> Result<(), CliError> {
    let p = run.problem()?;
    let field = run.teacher(&p)?;
    let head = run.cfg.head.build(p.target.dim, 1, p.target.context_dim, derive_key(run.seed, &[stream::INIT, 2]))?;
    let (head, rep) = train_direct_divergence(
        field.as_ref(),
        &p.train,
        head,
        mode,
        &run.cfg.distill,
        derive_key(run.seed, &[stream::OPTIMIZE, 2]),
    )?;
    save_head(run, direct_head_file(mode), &head, &rep)
}

/// One line of a per-sample likelihood CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoglikRow {
    index: usize,
    backend: String,
    n_probes: usize,
    log_prob: f64,
    /// Closed-form log density of the target at the point.
    target_log_prob: f64,
    bpd: Option<f64>,
    nfe: usize,
    accepted: usize,
    rejected: usize,
    matvecs: usize,
    delta_logp: f64,
    wall_time: f64,
}

fn loglik_file(backend: &DivergenceBackend) -> String {
    let mut name = backend.kind.name().to_string();
    if backend.kind.is_stochastic() {
        name.push_str(&format!("_{}", backend.n_probes));
    }
    format!("loglik_{name}.csv")
}

fn head_for(run: &Run, kind: BackendKind, dim: usize, context: usize) -> Result<Arc<LearnedHead>, CliError> {
    let file = match kind {
        BackendKind::DirectH1 => direct_head_file(DirectMode::H1),
        BackendKind::DirectH1b => direct_head_file(DirectMode::H1PlusB),
        _ => HEAD_FILE,
    };
    let path = match (kind, &run.cfg.head.checkpoint) {
        (BackendKind::Stad, Some(p)) => p.clone(),
        _ => run.path(file),
    };
    let ck = load_checkpoint(&path)?;
    check_shape(&ck, dim, 1, context)?;
    let head = LearnedHead::from_extras(ck.net, &ck.extras)?;
    let backend = DivergenceBackend::learned(Arc::new(head.clone()));
    if backend.kind != kind {
        return Err(CliError::new(
            ExitKind::Config,
            format!("{} holds a {} head, not {}", path.display(), backend.kind.name(), kind.name()),
        ));
    }
    Ok(Arc::new(head))
}

pub fn loglik(run: &Run) -> Result<(), CliError> {
    let p = run.problem()?;
    let field = run.teacher(&p)?;
    let lc = &run.cfg.likelihood;
    let mut backend = if lc.backend.is_learned() {
        DivergenceBackend::learned(head_for(run, lc.backend, p.target.dim, p.target.context_dim)?)
    } else if lc.backend.is_stochastic() {
        DivergenceBackend::stochastic(lc.backend, lc.n_probes)
    } else {
        DivergenceBackend::exact()
    };
    backend.probe_kind = lc.probe_kind;
    backend.redraw_probes = lc.redraw_probes;
    backend.hutchpp_refresh = lc.hutchpp_refresh;
    let test = p.target.sample(lc.n_test, derive_key(run.seed, &[stream::TEST_DATA]));
    let solver = likelihood_solver(p.target.dim, lc.rtol, lc.atol);
    let start = Instant::now();
    let reports = log_likelihood_batch(field.as_ref(), &backend, &test, &solver, derive_key(run.seed, &[stream::LIKELIHOOD]))?;
    let wall = start.elapsed().as_secs_f64();
    let mut w = csv::Writer::from_writer(run.create(&loglik_file(&backend))?);
    let mut abs_err = 0.0;
    for (i, r) in reports.iter().enumerate() {
        let target_log_prob = p.target.log_density(test.row(i), test.context(i))?;
        abs_err += (r.log_prob - target_log_prob).abs();
        w.serialize(LoglikRow {
            index: i,
            backend: backend.label(),
            n_probes: backend.n_probes,
            log_prob: r.log_prob,
            target_log_prob,
            bpd: lc.bpd_offset.map(|off| stad_core::odelik::bits_per_dimension(r.log_prob, p.target.dim, off)),
            nfe: r.nfe,
            accepted: r.accepted,
            rejected: r.rejected,
            matvecs: r.matvecs,
            delta_logp: r.delta_logp,
            wall_time: r.wall_time,
        })?;
    }
    w.flush()?;
    let n = reports.len() as f64;
    println!(
        "{}: {} points in {wall:.2}s, mean log p {:.5}, mean |log p - target| {:.3e}, mean NFE {:.1}",
        backend.label(),
        reports.len(),
        reports.iter().map(|r| r.log_prob).sum::<f64>() / n,
        abs_err / n,
        reports.iter().map(|r| r.nfe as f64).sum::<f64>() / n
    );
    Ok(())
}

fn read_loglik(path: &Path) -> Result<(String, usize, Vec<LikelihoodReport>), CliError> {
    let mut rd = csv::Reader::from_path(path)?;
    let rows = rd.deserialize().collect::<Result<Vec<LoglikRow>, _>>()?;
    let Some(first) = rows.first() else {
        return Err(CliError::new(ExitKind::ShapeMismatch, format!("{} has no rows", path.display())));
    };
    let (label, n_probes) = (first.backend.clone(), first.n_probes);
    let reports = rows
        .into_iter()
        .map(|r| LikelihoodReport {
            log_prob: r.log_prob,
            bpd: r.bpd,
            nfe: r.nfe,
            wall_time: r.wall_time,
            backend: r.backend,
            accepted: r.accepted,
            rejected: r.rejected,
            matvecs: r.matvecs,
            delta_logp: r.delta_logp,
        })
        .collect();
    Ok((label, n_probes, reports))
}

pub fn report(run: &Run) -> Result<(), CliError> {
    let exact_path = run.path("loglik_exact.csv");
    if !exact_path.exists() {
        return Err(CliError::new(
            ExitKind::MissingInput,
            format!("{} not found; run loglik with the exact backend first", exact_path.display()),
        ));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&run.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("loglik_") && n.ends_with(".csv")))
        .collect();
    files.sort();
    let (_, _, exact) = read_loglik(&exact_path)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    for f in &files {
        let (label, n_probes, reports) = read_loglik(f)?;
        let wall = reports.iter().map(|r| r.wall_time).sum();
        let (row, resid) = summarize(&label, n_probes, &exact, &reports, wall)?;
        if f != &exact_path {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("backend").trim_start_matches("loglik_");
            let hist = residual_histogram(&resid, run.cfg.likelihood.histogram_bins, None);
            write_histogram_csv(&hist, run.create(&format!("residual_hist_{stem}.csv"))?)?;
        }
        rows.push(row);
    }
    rows.sort_by_key(|r| (r.backend != "exact", r.backend.clone()));
    write_metrics_csv(&rows, run.create("metrics.csv")?)?;
    println!("{:<16} {:>12} {:>12} {:>10} {:>8} {:>8}", "backend", "mean_resid", "std_resid", "mae", "speedup", "rnfe");
    for r in &rows {
        println!(
            "{:<16} {:>12.4e} {:>12.4e} {:>10.4} {:>8.2} {:>8.3}",
            r.backend, r.mean_resid, r.std_resid, r.mae, r.speedup, r.rnfe
        );
    }
    Ok(())
}
