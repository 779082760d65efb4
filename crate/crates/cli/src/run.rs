use std::path::PathBuf;
use std::time::Instant;

use mbsde::analysis::{apriori_audit, epsilon_rate_fit, multiplier_gap, yosida_audit, AprioriAudit, YosidaAudit};
use mbsde::{
    check_wellposedness, default_probes, epsilon_table, path_norms, prox_step_solve, solution_residuals,
    solve_classical, solve_penalized, solve_schedule, ConvexSpec, EpsilonRow, NormReport, PicardDiagnostics,
    RateFit, Residuals, Solution, SolutionScheme, WellposednessReport,
};
use serde::Serialize;

use crate::config::{Built, Format, Mode, ProblemConfig};
use crate::error::CliError;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub hard_gate: bool,
    pub max_nodes: Option<usize>,
    pub beta: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ProblemConfig) {
        if let Some(out) = &self.out {
            config.output.dir = out.clone();
        }
        if let Some(format) = self.format {
            config.output.format = format;
        }
        if self.hard_gate {
            config.solver.hard_gate = true;
        }
        if let Some(n) = self.max_nodes {
            config.problem.max_nodes = Some(n);
        }
        if let Some(b) = self.beta {
            config.solver.beta = Some(b);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeSummary {
    pub n_steps: usize,
    pub bm_dim: usize,
    pub horizon: f64,
    pub dt: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Norms {
    pub y: NormReport<f64>,
    pub z: NormReport<f64>,
    pub u: NormReport<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub scheme: SolutionScheme<f64>,
    pub y0: Vec<f64>,
    pub z0: Vec<f64>,
    pub norms: Norms,
    pub diagnostics: PicardDiagnostics<f64>,
    pub residuals: Residuals<f64>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateReport {
    Exact,
    Fit {
        slope: f64,
        intercept: f64,
        residual: f64,
        points: usize,
    },
    InsufficientData {
        needed: usize,
        have: usize,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct GapRow {
    pub epsilon: f64,
    /// `||U^eps - U^prox||_H2^2`
    pub h2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub penalized_epsilon: f64,
    pub penalized_y0: Vec<f64>,
    pub prox_y0: Vec<f64>,
    /// Largest componentwise `|Y0^pen - Y0^prox|`.
    pub gap: f64,
    pub multiplier_gap: Vec<GapRow>,
}

/// Everything a run produces apart from timings.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    /// Effective config (after command-line overrides), re-runnable as is.
    pub config: String,
    pub mode: Mode,
    pub tree: TreeSummary,
    pub beta: f64,
    pub wellposedness: WellposednessReport<f64>,
    pub runs: Vec<RunSummary>,
    pub epsilon_table: Vec<EpsilonRow<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_fit: Option<RateReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apriori: Option<AprioriAudit<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yosida: Option<YosidaAudit<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
    pub total_seconds: f64,
}

struct Clock {
    start: Instant,
    last: Instant,
    timings: Timings,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Clock {
            start: now,
            last: now,
            timings: Timings::default(),
        }
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.timings
            .phases
            .push((phase.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    fn finish(mut self) -> Timings {
        self.timings.total_seconds = self.start.elapsed().as_secs_f64();
        self.timings
    }
}

fn summarize(label: String, sol: &Solution<f64>, b: &Built, phi: &ConvexSpec<f64>, beta: f64) -> Result<RunSummary, CliError> {
    let probes = default_probes(phi, &b.xi);
    let residuals = solution_residuals(sol, &b.xi, &b.generator, phi, &b.tree, &probes)?;
    Ok(RunSummary {
        label,
        scheme: sol.scheme,
        y0: sol.y.root().to_vec(),
        z0: sol.z.root().to_vec(),
        norms: Norms {
            y: path_norms(&sol.y, &b.tree, beta)?,
            z: path_norms(&sol.z, &b.tree, beta)?,
            u: path_norms(&sol.u, &b.tree, beta)?,
        },
        diagnostics: sol.diagnostics.clone(),
        residuals,
    })
}

fn rate_report(rows: &[EpsilonRow<f64>]) -> Result<RateReport, CliError> {
    match epsilon_rate_fit(rows) {
        Ok(RateFit::Exact) => Ok(RateReport::Exact),
        Ok(RateFit::Fit {
            slope,
            intercept,
            residual,
            points,
        }) => Ok(RateReport::Fit {
            slope,
            intercept,
            residual,
            points,
        }),
        Err(mbsde::Error::InsufficientData { needed, have }) => Ok(RateReport::InsufficientData { needed, have }),
        Err(e) => Err(e.into()),
    }
}

/// Validates the config, runs the requested schemes and collects the report.
pub fn execute(config: &ProblemConfig) -> Result<(RunReport, Timings), CliError> {
    let mut clock = Clock::new();
    let b = config.build()?;
    clock.lap("build");

    let l = b.generator.lipschitz_instant();
    let beta = b.solver.beta_for(l);
    let wellposedness = check_wellposedness(l, b.generator.lipschitz_delay(), b.tree.horizon(), beta)?;
    if b.solver.hard_gate && !wellposedness.existence_ok {
        return Err(mbsde::Error::Gate {
            k_exp: b.generator.lipschitz_delay() * (beta * b.tree.horizon()).exp(),
            six_l2: 6.0 * l * l,
        }
        .into());
    }

    let mode = config.run.mode;
    let mut runs = Vec::new();
    let mut table = Vec::new();
    let mut rate_fit = None;
    let mut apriori = None;
    let mut yosida = None;
    let mut comparison = None;

    match mode {
        Mode::Classical => {
            let sol = solve_classical(&b.tree, &b.xi, &b.generator, &b.solver)?;
            clock.lap("solve");
            let zero = ConvexSpec::zero(b.generator.m());
            runs.push(summarize("classical".into(), &sol, &b, &zero, beta)?);
        }
        Mode::Penalized => {
            let sol = solve_penalized(&b.tree, &b.xi, &b.generator, &b.phi, b.epsilon, &b.solver)?;
            clock.lap("solve");
            runs.push(summarize(format!("penalized eps={}", b.epsilon), &sol, &b, &b.phi, beta)?);
        }
        Mode::Prox => {
            let sol = prox_step_solve(&b.tree, &b.xi, &b.generator, &b.phi, &b.solver)?;
            clock.lap("solve");
            runs.push(summarize("prox".into(), &sol, &b, &b.phi, beta)?);
        }
        Mode::Bsvi | Mode::Compare => {
            // The prox reference is independent of the schedule; run both at once.
            let (schedule, prox) = std::thread::scope(|s| {
                let prox = (mode == Mode::Compare)
                    .then(|| s.spawn(|| prox_step_solve(&b.tree, &b.xi, &b.generator, &b.phi, &b.solver)));
                let schedule = solve_schedule(&b.tree, &b.xi, &b.generator, &b.phi, &b.solver);
                (schedule, prox.map(|h| h.join().expect("prox solver thread panicked")))
            });
            let schedule = schedule?;
            let prox = prox.transpose()?;
            clock.lap("solve");

            for (eps, sol) in &schedule {
                runs.push(summarize(format!("penalized eps={eps}"), sol, &b, &b.phi, beta)?);
            }
            table = epsilon_table(&schedule, &b.phi, &b.tree, beta)?;
            rate_fit = Some(rate_report(&table)?);
            apriori = Some(apriori_audit(&schedule, &b.xi, &b.generator, &b.tree, beta)?);
            yosida = Some(yosida_audit(&schedule, &b.phi, &b.xi, &b.generator, &b.tree, beta)?);
            if let Some(prox) = prox {
                runs.push(summarize("prox".into(), &prox, &b, &b.phi, beta)?);
                let (eps, last) = schedule.last().expect("schedule is nonempty");
                let gap = last
                    .y0()
                    .iter()
                    .zip(prox.y0())
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max);
                let gaps = multiplier_gap(&schedule, &prox, &b.tree, beta)?;
                comparison = Some(Comparison {
                    penalized_epsilon: *eps,
                    penalized_y0: last.y0().to_vec(),
                    prox_y0: prox.y0().to_vec(),
                    gap,
                    multiplier_gap: gaps.into_iter().map(|(epsilon, h2)| GapRow { epsilon, h2 }).collect(),
                });
            }
            clock.lap("analysis");
        }
    }

    let report = RunReport {
        config: crate::config::to_toml(config),
        mode,
        tree: TreeSummary {
            n_steps: b.tree.n_steps(),
            bm_dim: b.tree.bm_dim(),
            horizon: b.tree.horizon(),
            dt: b.tree.dt(),
            nodes: b.tree.total_nodes(),
        },
        beta,
        wellposedness,
        runs,
        epsilon_table: table,
        rate_fit,
        apriori,
        yosida,
        comparison,
    };
    Ok((report, clock.finish()))
}
