//! Shared end-to-end setup: a DSM-trained 2-D mixture teacher and the 26-D
//! conditional task, each with a distilled residual head.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;

use stad_core::dynamics::{AnalyticMixtureField, ScheduleSpec, ScoreNetField, VelocityField};
use stad_core::net::{Activation, FieldNet, LrSchedule, OptimizerConfig, TimeEmbedding};
use stad_core::odelik::{compare_backends, likelihood_solver, BackendKind, DivergenceBackend, SolverConfig};
use stad_core::stad::{distill, LearnedHead, SteinHyper, TimeProposal};
use stad_core::targets::{make_cosmos_like, Dataset, TargetDensity};
use stad_core::train::{train_direct_divergence, train_score_dsm, DirectMode, TrainHyper};

pub struct Scores {
    pub mae: f64,
    pub nfe: usize,
    /// NFE over the single-probe Hutchinson NFE on the same points.
    pub rnfe_vs_h1: f64,
}

pub struct Task {
    pub name: &'static str,
    pub hutch1: Scores,
    pub stad: Scores,
}

pub struct DirectComparison {
    pub budget_s: f64,
    pub stad_mae: f64,
    pub h1_mae: f64,
    pub h1b_mae: f64,
}

pub struct EndToEnd {
    pub mixture2d: Task,
    pub cosmos: Task,
    pub direct: DirectComparison,
}

pub fn mixture_target() -> TargetDensity {
    let cov = |a: f64, b: f64, c: f64| DMatrix::from_row_slice(2, 2, &[a, c, c, b]);
    TargetDensity::mixture(
        &[0.4, 0.35, 0.25],
        vec![vec![-1.5, 0.5], vec![1.5, 1.0], vec![0.0, -1.5]],
        vec![cov(0.3, 0.2, 0.05), cov(0.25, 0.4, -0.1), cov(0.5, 0.15, 0.0)],
    )
    .unwrap()
}

/// DSM-trained score network on the 2-D mixture.
pub fn mixture_teacher(seed: u64) -> (ScoreNetField, Dataset) {
    let data = mixture_target().sample(20_000, seed);
    let sched = ScheduleSpec::vp();
    let net = FieldNet::new(&[2, 64, 64, 2], Activation::Silu, TimeEmbedding::AppendLogT, 0, seed).unwrap();
    let hyper = TrainHyper {
        steps: 4000,
        ..TrainHyper::default()
    };
    let (net, _) = train_score_dsm(net, &data, &sched, &hyper, seed).unwrap();
    (ScoreNetField::new(Arc::new(net), sched).unwrap(), data)
}

pub fn stein_hyper(steps: usize, lr: f64) -> SteinHyper {
    SteinHyper {
        steps,
        batch: 256,
        cache_size: 50_000,
        rebuild_period: 1000,
        proposal: TimeProposal::Uniform,
        optimizer: OptimizerConfig {
            schedule: LrSchedule::Cosine {
                lr_max: lr,
                lr_min: lr * 1e-3,
                total_steps: steps as u64,
            },
            ..OptimizerConfig::default()
        },
        ..SteinHyper::default()
    }
}

fn head_net(dim: usize, ctx: usize, width: usize, seed: u64) -> FieldNet {
    FieldNet::new(&[dim, width, width, 1], Activation::Silu, TimeEmbedding::AppendLogT, ctx, seed).unwrap()
}

/// Exact, H(1) and each learned head on the same test points.
fn score_heads(field: &dyn VelocityField, test: &Dataset, heads: &[Arc<LearnedHead>], solver: &SolverConfig) -> (Scores, Vec<Scores>) {
    let mut backends = vec![DivergenceBackend::exact(), DivergenceBackend::stochastic(BackendKind::Hutchinson, 1)];
    backends.extend(heads.iter().map(|h| DivergenceBackend::learned(h.clone())));
    let cmp = compare_backends(field, test, &backends, solver, 17).unwrap();
    let nfe: Vec<usize> = cmp.reports.iter().map(|r| r.iter().map(|x| x.nfe).sum()).collect();
    let scores = |i: usize| Scores {
        mae: cmp.rows[i].mae,
        nfe: nfe[i],
        rnfe_vs_h1: nfe[i] as f64 / nfe[1] as f64,
    };
    for row in &cmp.rows {
        eprintln!("  {:<24} mae {:.4} bias {:+.4} rnfe {:.3} wall {:.1}s", row.backend, row.mae, row.mean_resid, row.rnfe, row.wall_s);
    }
    (scores(1), (2..backends.len()).map(scores).collect())
}

pub fn end_to_end() -> EndToEnd {
    let start = Instant::now();
    let (teacher, data) = mixture_teacher(11);
    eprintln!("  2-D teacher trained in {:.1}s", start.elapsed().as_secs_f64());
    let test2 = mixture_target().sample(100, 12);
    let solver2 = likelihood_solver(2, 1e-5, 1e-5);

    let steps = 4000;
    let (stad2, rep) = distill(&teacher, &data, head_net(2, 0, 64, 13), &stein_hyper(steps, 1e-3), 14).unwrap();
    let budget = rep.wall_time_cache_s + rep.wall_time_train_s;
    eprintln!("  2-D StAD head: {steps} steps in {budget:.1}s, loss {:.4}", rep.final_loss);

    // Direct baselines get the same wall-clock budget, cache included.
    let direct = |mode: DirectMode, seed: u64| {
        let hyper = SteinHyper {
            time_budget_s: Some(budget),
            steps: 1_000_000,
            ..stein_hyper(steps, 1e-3)
        };
        let (head, rep) = train_direct_divergence(&teacher, &data, head_net(2, 0, 64, seed), mode, &hyper, seed + 1).unwrap();
        eprintln!("  direct {mode:?}: {} steps, loss {:.4}", rep.steps, rep.final_loss);
        head
    };
    let h1 = direct(DirectMode::H1, 15);
    let h1b = direct(DirectMode::H1PlusB, 17);
    let stad2 = Arc::new(stad2);
    let (hutch2, learned) = score_heads(&teacher, &test2, &[stad2, Arc::new(h1), Arc::new(h1b)], &solver2);
    let mut learned = learned.into_iter();
    let (stad2_scores, h1_scores, h1b_scores) = (learned.next().unwrap(), learned.next().unwrap(), learned.next().unwrap());

    let (target, cdata) = make_cosmos_like(1, 20_000);
    let cosmos = AnalyticMixtureField::new(Arc::new(target), ScheduleSpec::vp());
    let ctest = cosmos.target.sample(24, 99);
    let csteps = 25_000;
    let (chead, crep) = distill(&cosmos, &cdata, head_net(26, 26, 128, 3), &stein_hyper(csteps, 1e-3), 5).unwrap();
    eprintln!("  26-D StAD head: {csteps} steps in {:.1}s, loss {:.4}", crep.wall_time_cache_s + crep.wall_time_train_s, crep.final_loss);
    let (hutch26, stad26) = score_heads(&cosmos, &ctest, &[Arc::new(chead)], &likelihood_solver(26, 1e-5, 1e-5));

    EndToEnd {
        direct: DirectComparison {
            budget_s: budget,
            stad_mae: stad2_scores.mae,
            h1_mae: h1_scores.mae,
            h1b_mae: h1b_scores.mae,
        },
        mixture2d: Task {
            name: "2-D mixture",
            hutch1: hutch2,
            stad: stad2_scores,
        },
        cosmos: Task {
            name: "26-D conditional",
            hutch1: hutch26,
            stad: stad26.into_iter().next().unwrap(),
        },
    }
}
