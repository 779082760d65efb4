//! Problem configuration files (TOML).
//!
//! ```toml
//! [problem]
//! horizon = 1.0
//! n_steps = 4
//! bm_dim = 1
//! m = 1
//!
//! [terminal]
//! kind = "clipped_linear"      # constant | linear | clipped_linear
//! a = [0.2]
//! b = [1.0]                    # m x bm_dim, row-major
//! lo = [-0.5]
//! hi = [0.5]
//!
//! [generator]
//! kind = "linear_instant"      # zero | linear_instant | delayed_z | running_integral_z | moving_average_z
//! a = [1.0]
//! b = [0.0]
//!
//! [phi]
//! kind = "indicator_box"       # zero | indicator_box | quadratic | one_norm | asymmetric_abs
//! lo = [-0.5]
//! hi = [0.5]
//!
//! [solver]
//! beta = 1.0
//!
//! [run]
//! mode = "bsvi"                # classical | penalized | bsvi | prox | compare
//! ```

use std::path::PathBuf;

use mbsde::{
    ConvexSpec, DelayMeasure, GeneratorSpec, PenaltyStep, ScenarioTree, SolverConfig, Terminal, Weight,
    DEFAULT_MAX_NODES,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub problem: ProblemSection,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub phi: PhiConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub horizon: f64,
    pub n_steps: usize,
    #[serde(default = "one")]
    pub bm_dim: usize,
    #[serde(default = "one")]
    pub m: usize,
    /// Cap on the number of tree nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_nodes: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Constant { value: Vec<f64> },
    Linear { a: Vec<f64>, b: Vec<f64> },
    ClippedLinear { a: Vec<f64>, b: Vec<f64>, lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightConfig {
    Constant { value: f64 },
    /// `values[k]` applies from `breaks[k]` until the next break.
    Steps { breaks: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureConfig {
    DiracAtZero,
    Dirac { at: f64 },
    Uniform,
    /// `[[theta, weight], ...]` with `theta` in `[-T, 0]`.
    Mixture { atoms: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Zero,
    /// `a` (m x m) and `b` (m x m*bm_dim), row-major.
    LinearInstant,
    /// `kappa`, `delay`.
    DelayedZ,
    /// `kappa`.
    RunningIntegralZ,
    /// `weight`, `alpha`.
    MovingAverageZ,
}

/// Generator section. Only the parameters of the selected `kind` may be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<MeasureConfig>,
    /// Constant term `F(t, 0, 0, 0, 0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    /// Declared `L`, replacing the built-in value (must still pass the audit).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_instant: Option<f64>,
    /// Declared `K`, replacing the built-in value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_delay: Option<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            kind: GeneratorKind::Zero,
            a: None,
            b: None,
            kappa: None,
            delay: None,
            weight: None,
            alpha: None,
            offset: None,
            lipschitz_instant: None,
            lipschitz_delay: None,
        }
    }
}

fn require<T: Clone>(value: &Option<T>, kind: GeneratorKind, name: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| invalid(format!("generator kind {kind:?} needs `{name}`")))
}

impl GeneratorConfig {
    fn check_unused(&self) -> Result<(), CliError> {
        let used: &[&str] = match self.kind {
            GeneratorKind::Zero => &[],
            GeneratorKind::LinearInstant => &["a", "b"],
            GeneratorKind::DelayedZ => &["kappa", "delay"],
            GeneratorKind::RunningIntegralZ => &["kappa"],
            GeneratorKind::MovingAverageZ => &["weight", "alpha"],
        };
        let set = [
            ("a", self.a.is_some()),
            ("b", self.b.is_some()),
            ("kappa", self.kappa.is_some()),
            ("delay", self.delay.is_some()),
            ("weight", self.weight.is_some()),
            ("alpha", self.alpha.is_some()),
        ];
        for (name, present) in set {
            if present && !used.contains(&name) {
                return Err(invalid(format!("`{name}` is not a parameter of generator kind {:?}", self.kind)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiConfig {
    #[default]
    Zero,
    /// Bounds may be `-inf` / `inf`.
    IndicatorBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Quadratic {
        c: f64,
    },
    OneNorm {
        c: f64,
    },
    AsymmetricAbs {
        left: f64,
        right: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyStepConfig {
    Implicit,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Defaults to `24 L^2 + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_iters")]
    pub picard_max_iters: usize,
    /// Defaults to `2^0, 2^-1, ..., 2^-10`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_schedule: Option<Vec<f64>>,
    /// Epsilon for `penalized` mode; defaults to the last schedule entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_step")]
    pub penalty_step: PenaltyStepConfig,
    #[serde(default)]
    pub hard_gate: bool,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_iters() -> usize {
    200
}

fn default_step() -> PenaltyStepConfig {
    PenaltyStepConfig::Implicit
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            beta: None,
            picard_tol: default_tol(),
            picard_max_iters: default_iters(),
            epsilon_schedule: None,
            epsilon: None,
            penalty_step: default_step(),
            hard_gate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Classical,
    Penalized,
    Bsvi,
    Prox,
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_mode() -> Mode {
    Mode::Bsvi
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { mode: default_mode() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_format")]
    pub format: Format,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_format() -> Format {
    Format::Json
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            format: default_format(),
        }
    }
}

/// Parses a config; errors carry line and column.
pub fn parse(text: &str) -> Result<ProblemConfig, CliError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_col(text, span.start))
            .unwrap_or((0, 0));
        CliError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn to_toml(config: &ProblemConfig) -> String {
    toml::to_string(config).expect("config is always representable in TOML")
}

/// Core objects built from a validated config.
pub struct Built {
    pub tree: ScenarioTree<f64>,
    pub xi: Vec<f64>,
    pub generator: GeneratorSpec<f64>,
    pub phi: ConvexSpec<f64>,
    pub solver: SolverConfig<f64>,
    pub epsilon: f64,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl ProblemConfig {
    /// Builds the tree, terminal data, generator and penalty, running every
    /// structural check and the Lipschitz audit of the generator.
    pub fn build(&self) -> Result<Built, CliError> {
        let p = &self.problem;
        if p.m == 0 || p.bm_dim == 0 {
            return Err(invalid("m and bm_dim must be positive"));
        }
        let cap = p.max_nodes.unwrap_or(DEFAULT_MAX_NODES);
        let tree = ScenarioTree::new(p.n_steps, p.horizon, p.bm_dim, cap)?;

        let terminal = match &self.terminal {
            TerminalConfig::Constant { value } => Terminal::Constant(value.clone()),
            TerminalConfig::Linear { a, b } => Terminal::Linear {
                a: a.clone(),
                b: b.clone(),
            },
            TerminalConfig::ClippedLinear { a, b, lo, hi } => Terminal::ClippedLinear {
                a: a.clone(),
                b: b.clone(),
                lo: lo.clone(),
                hi: hi.clone(),
            },
        };
        if terminal.dim() != p.m {
            return Err(invalid(format!(
                "terminal has {} components, problem.m = {}",
                terminal.dim(),
                p.m
            )));
        }
        let xi = terminal.leaves(&tree)?;

        let generator = self.build_generator(&tree)?;
        generator.validate(tree.grid())?;
        let phi = self.build_phi()?;
        if phi.dim() != p.m {
            return Err(invalid(format!("phi has dimension {}, problem.m = {}", phi.dim(), p.m)));
        }

        let s = &self.solver;
        let mut solver = SolverConfig {
            beta: s.beta,
            picard_tol: s.picard_tol,
            picard_max_iters: s.picard_max_iters,
            penalty_step: match s.penalty_step {
                PenaltyStepConfig::Implicit => PenaltyStep::Implicit,
                PenaltyStepConfig::Explicit => PenaltyStep::Explicit,
            },
            hard_gate: s.hard_gate,
            ..SolverConfig::default()
        };
        if let Some(schedule) = &s.epsilon_schedule {
            solver.epsilon_schedule = schedule.clone();
        }
        solver.validate()?;
        let epsilon = s.epsilon.unwrap_or(*solver.epsilon_schedule.last().expect("validated nonempty"));
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(invalid("solver.epsilon must be positive"));
        }
        if self.run.mode != Mode::Classical {
            mbsde::check_terminal(&tree, &xi, &phi)?;
        }
        Ok(Built {
            tree,
            xi,
            generator,
            phi,
            solver,
            epsilon,
        })
    }

    fn build_generator(&self, tree: &ScenarioTree<f64>) -> Result<GeneratorSpec<f64>, CliError> {
        let (m, d, horizon) = (self.problem.m, self.problem.bm_dim, tree.horizon());
        let g = &self.generator;
        g.check_unused()?;
        let kind = g.kind;
        let mut spec = match kind {
            GeneratorKind::Zero => GeneratorSpec::zero(m, d),
            GeneratorKind::LinearInstant => {
                GeneratorSpec::linear_instant(require(&g.a, kind, "a")?, require(&g.b, kind, "b")?, m, d)?
            }
            GeneratorKind::DelayedZ => GeneratorSpec::delayed_z(
                require(&g.kappa, kind, "kappa")?,
                require(&g.delay, kind, "delay")?,
                m,
                d,
                horizon,
            )?,
            GeneratorKind::RunningIntegralZ => {
                GeneratorSpec::running_integral_z(require(&g.kappa, kind, "kappa")?, m, d, horizon)?
            }
            GeneratorKind::MovingAverageZ => {
                let weight = match require(&g.weight, kind, "weight")? {
                    WeightConfig::Constant { value } => Weight::Constant(value),
                    WeightConfig::Steps { breaks, values } => Weight::Steps { breaks, values },
                };
                let alpha = match require(&g.alpha, kind, "alpha")? {
                    MeasureConfig::DiracAtZero => DelayMeasure::DiracAtZero,
                    MeasureConfig::Dirac { at } => DelayMeasure::Dirac(at),
                    MeasureConfig::Uniform => DelayMeasure::UniformOn,
                    MeasureConfig::Mixture { atoms } => DelayMeasure::DiscreteMixture(atoms),
                };
                GeneratorSpec::moving_average_z(weight, alpha, m, d)?
            }
        };
        if let Some(offset) = &g.offset {
            spec = spec.with_offset(offset.clone())?;
        }
        if g.lipschitz_instant.is_some() || g.lipschitz_delay.is_some() {
            let l = g.lipschitz_instant.unwrap_or(spec.lipschitz_instant());
            let k = g.lipschitz_delay.unwrap_or(spec.lipschitz_delay());
            spec = spec.with_constants(l, k);
        }
        Ok(spec)
    }

    fn build_phi(&self) -> Result<ConvexSpec<f64>, CliError> {
        let m = self.problem.m;
        Ok(match &self.phi {
            PhiConfig::Zero => ConvexSpec::zero(m),
            PhiConfig::IndicatorBox { lo, hi } => ConvexSpec::indicator_box(lo.clone(), hi.clone())?,
            PhiConfig::Quadratic { c } => ConvexSpec::quadratic(*c, m)?,
            PhiConfig::OneNorm { c } => ConvexSpec::one_norm(*c, m)?,
            PhiConfig::AsymmetricAbs { left, right } => ConvexSpec::asymmetric_abs(*left, *right)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[problem]
horizon = 1.0
n_steps = 3

[terminal]
kind = "linear"
a = [0.0]
b = [1.0]
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.generator.kind, GeneratorKind::Zero);
        assert_eq!(c.phi, PhiConfig::Zero);
        assert_eq!(c.run.mode, Mode::Bsvi);
        assert_eq!(c.output.format, Format::Json);
        let built = c.build().unwrap();
        assert_eq!(built.xi.len(), 8);
        assert_eq!(built.epsilon, 0.5f64.powi(10));
    }

    #[test]
    fn echo_round_trips() {
        let text = r#"
[problem]
horizon = 0.5
n_steps = 4

[terminal]
kind = "clipped_linear"
a = [0.0]
b = [1.0]
lo = [-inf]
hi = [0.25]

[generator]
kind = "moving_average_z"
weight = { kind = "steps", breaks = [0.0, 0.25], values = [0.1, 0.3] }
alpha = { kind = "mixture", atoms = [[-0.25, 0.5], [0.0, 0.5]] }
offset = [0.2]
lipschitz_instant = 1.0

[phi]
kind = "indicator_box"
lo = [-inf]
hi = [0.25]

[solver]
beta = 2.0
epsilon_schedule = [1.0, 0.5, 0.25]
"#;
        let c = parse(text).unwrap();
        let again = parse(&to_toml(&c)).unwrap();
        assert_eq!(c, again);
        c.build().unwrap();
    }

    #[test]
    fn parse_errors_have_positions() {
        let bad = "[problem]\nhorizon = 1.0\nn_steps = \"four\"\n";
        match parse(bad) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let unknown = MINIMAL.replace("n_steps = 3", "n_steps = 3\nsteps = 4");
        assert!(matches!(parse(&unknown), Err(CliError::Parse { .. })));
    }

    #[test]
    fn validation_errors() {
        let mut c = parse(MINIMAL).unwrap();
        c.phi = PhiConfig::IndicatorBox {
            lo: vec![-0.5],
            hi: vec![0.5],
        };
        // xi = W(T) leaves the box on the outer leaves.
        assert!(matches!(
            c.build(),
            Err(CliError::Core(mbsde::Error::TerminalOutsideDomain { .. }))
        ));
        c.run.mode = Mode::Classical;
        assert!(c.build().is_ok());

        let mut c = parse(MINIMAL).unwrap();
        c.generator.lipschitz_delay = Some(0.0);
        c.generator.kind = GeneratorKind::DelayedZ;
        c.generator.kappa = Some(1.0);
        assert!(matches!(c.build(), Err(CliError::Validation(_))));
        c.generator.delay = Some(0.5);
        assert!(matches!(c.build(), Err(CliError::Core(mbsde::Error::Lipschitz { .. }))));
        c.generator.a = Some(vec![1.0]);
        assert!(matches!(c.build(), Err(CliError::Validation(_))));

        let mut c = parse(MINIMAL).unwrap();
        c.problem.m = 2;
        assert!(matches!(c.build(), Err(CliError::Validation(_))));
    }
}
