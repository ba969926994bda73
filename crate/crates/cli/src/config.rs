//! Run configuration: TOML parsing and validation into core model types.

use std::fmt;
use std::path::{Path, PathBuf};

use rdm_lab_core::linalg::PauliAxis;
use rdm_lab_core::model::{
    Disorder, EnvOperatorSpec, EnvironmentSpec, InteractionTerm, IsingChain, ModelSpec,
    DEFAULT_DEGENERACY_TOLERANCE, DEFAULT_DIMENSION_CAP,
};
use rdm_lab_core::renorm::DEFAULT_THRESHOLD;
use rdm_lab_core::{c64, Mat};
use serde::Deserialize;

/// A configuration problem, tagged with the dotted path of the offending field.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }

    fn missing(field: &str) -> Self {
        ConfigError::new(field, "missing required field")
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<RawModel>,
    analysis: Option<RawAnalysis>,
    output: Option<RawOutput>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    label: Option<String>,
    degeneracy_tolerance: Option<f64>,
    dimension_cap: Option<usize>,
    system: Option<RawSystem>,
    environment: Option<RawEnvironment>,
    #[serde(default)]
    interaction: Vec<RawInteraction>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    gap: Option<f64>,
    matrix: Option<Rows>,
    matrix_imag: Option<Rows>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvironment {
    kind: Option<String>,
    n_sites: Option<usize>,
    coupling_j: Option<f64>,
    transverse_g: Option<f64>,
    longitudinal_h: Option<f64>,
    defect: Option<f64>,
    couplings: Option<Vec<f64>>,
    transverse: Option<Vec<f64>>,
    longitudinal: Option<Vec<f64>>,
    disorder_seed: Option<u64>,
    disorder_amplitude: Option<f64>,
    matrix: Option<Rows>,
    matrix_imag: Option<Rows>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInteraction {
    system: Option<String>,
    system_matrix: Option<Rows>,
    system_matrix_imag: Option<Rows>,
    env: Option<String>,
    axis: Option<String>,
    site: Option<usize>,
    env_matrix: Option<Rows>,
    env_matrix_imag: Option<Rows>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    lambdas: Option<Vec<f64>>,
    epsilons: Option<Vec<f64>>,
    deltas: Option<Vec<f64>>,
    center_fractions: Option<Vec<f64>>,
    energy_starts: Option<Vec<f64>>,
    middle_fraction: Option<f64>,
    env_sizes: Option<Vec<usize>>,
    tau_sw: Option<f64>,
    tau_sq: Option<f64>,
    samples: Option<usize>,
    seed: Option<u64>,
    renorm: Option<String>,
    renorm_matrix: Option<Rows>,
    renorm_matrix_imag: Option<Rows>,
    dos_bins: Option<usize>,
    eth_bins: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<PathBuf>,
    formats: Option<Vec<String>>,
    cache_dir: Option<PathBuf>,
}

/// Where shells sit: either centered at fractions of the coupled spectrum or
/// starting at explicit energies.
#[derive(Clone, Debug, PartialEq)]
pub enum Placement {
    CenterFraction(f64),
    EnergyStart(f64),
}

#[derive(Clone, Debug)]
pub enum RenormChoice {
    Zero,
    EthMean,
    Custom(Mat<c64>),
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub lambdas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub deltas: Vec<f64>,
    pub placements: Vec<Placement>,
    pub middle_fraction: f64,
    /// Chain lengths for the `env_size` sweep; empty when not configured.
    pub env_sizes: Vec<usize>,
    pub tau_sw: f64,
    pub tau_sq: f64,
    pub samples: usize,
    pub seed: Option<u64>,
    pub renorm: RenormChoice,
    pub dos_bins: usize,
    pub eth_bins: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Output {
    pub directory: PathBuf,
    pub json: bool,
    pub csv: bool,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Model with coupling 0; each analysis point sets its own coupling.
    pub model: ModelSpec,
    pub analysis: Analysis,
    pub output: Output,
}

impl RunConfig {
    /// The model with its chain resized, keeping per-site defaults.
    pub fn model_with_sites(&self, n_sites: usize) -> Option<ModelSpec> {
        let EnvironmentSpec::Chain(chain) = &self.model.environment else {
            return None;
        };
        let mut spec = self.model.clone();
        let uniform = |v: &[f64], default: f64| v.get(1).or(v.first()).copied().unwrap_or(default);
        let mut longitudinal = vec![uniform(&chain.longitudinal, IsingChain::H); n_sites];
        if let (Some(first), Some(&h0)) = (longitudinal.first_mut(), chain.longitudinal.first()) {
            *first = h0;
        }
        spec.environment = EnvironmentSpec::Chain(IsingChain {
            couplings: vec![uniform(&chain.couplings, IsingChain::J); n_sites.saturating_sub(1)],
            transverse: vec![uniform(&chain.transverse, IsingChain::G); n_sites],
            longitudinal,
            disorder: chain.disorder,
        });
        for t in &spec.interaction_terms {
            if let EnvOperatorSpec::Pauli { site, .. } = t.env_op {
                if site >= n_sites {
                    return None;
                }
            }
        }
        Some(spec)
    }
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| ConfigError::new("config", e.to_string()))?;
    let model = build_model(raw.model.ok_or_else(|| ConfigError::missing("model"))?)?;
    let analysis = build_analysis(
        raw.analysis
            .ok_or_else(|| ConfigError::missing("analysis"))?,
        model.d_s(),
    )?;
    let output = build_output(raw.output.ok_or_else(|| ConfigError::missing("output"))?)?;
    Ok(RunConfig {
        model,
        analysis,
        output,
    })
}

fn matrix(field: &str, re: &Rows, im: Option<&Rows>) -> Result<Mat<c64>, ConfigError> {
    let n = re.len();
    if n == 0 || re.iter().any(|r| r.len() != n) {
        return Err(ConfigError::new(
            field,
            "matrix must be square and nonempty",
        ));
    }
    if let Some(im) = im {
        if im.len() != n || im.iter().any(|r| r.len() != n) {
            return Err(ConfigError::new(
                format!("{field}_imag"),
                "imaginary part must match the real part's shape",
            ));
        }
    }
    let m = Mat::from_fn(n, n, |r, c| {
        c64::new(re[r][c], im.map_or(0.0, |im| im[r][c]))
    });
    let dev = rdm_lab_core::linalg::hermitian_deviation(m.as_ref());
    if dev > 1e-12 {
        return Err(ConfigError::new(
            field,
            format!("matrix is not Hermitian (deviation {dev:e})"),
        ));
    }
    Ok(m)
}

fn axis(field: &str, name: &str) -> Result<PauliAxis, ConfigError> {
    match name.to_ascii_lowercase().as_str() {
        "x" => Ok(PauliAxis::X),
        "y" => Ok(PauliAxis::Y),
        "z" => Ok(PauliAxis::Z),
        other => Err(ConfigError::new(
            field,
            format!("unknown Pauli axis `{other}`"),
        )),
    }
}

fn finite(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::new(field, "must be finite"))
    }
}

fn build_model(raw: RawModel) -> Result<ModelSpec, ConfigError> {
    let system = raw
        .system
        .ok_or_else(|| ConfigError::missing("model.system"))?;
    let h_s = match (system.gap, &system.matrix) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::new(
                "model.system",
                "give either gap or matrix, not both",
            ))
        }
        (Some(gap), None) => {
            let gap = finite("model.system.gap", gap)?;
            if gap == 0.0 {
                return Err(ConfigError::new(
                    "model.system.gap",
                    "qubit gap must be nonzero",
                ));
            }
            rdm_lab_core::linalg::diagonal(&[0.0, gap])
        }
        (None, Some(m)) => matrix("model.system.matrix", m, system.matrix_imag.as_ref())?,
        (None, None) => return Err(ConfigError::missing("model.system.gap")),
    };
    let d_s = h_s.nrows();

    let env = raw
        .environment
        .ok_or_else(|| ConfigError::missing("model.environment"))?;
    let kind = env.kind.clone().unwrap_or_else(|| "chain".into());
    let environment = match kind.as_str() {
        "chain" => {
            let n = env
                .n_sites
                .ok_or_else(|| ConfigError::missing("model.environment.n_sites"))?;
            if n == 0 || n > 24 {
                return Err(ConfigError::new(
                    "model.environment.n_sites",
                    "must lie in 1..=24",
                ));
            }
            let mut chain = IsingChain::defect(n);
            let scalar = |name: &str, v: Option<f64>| {
                v.map(|x| finite(&format!("model.environment.{name}"), x))
                    .transpose()
            };
            if let Some(j) = scalar("coupling_j", env.coupling_j)? {
                chain.couplings = vec![j; n - 1];
            }
            if let Some(g) = scalar("transverse_g", env.transverse_g)? {
                chain.transverse = vec![g; n];
            }
            let h = scalar("longitudinal_h", env.longitudinal_h)?.unwrap_or(IsingChain::H);
            let defect = scalar("defect", env.defect)?.unwrap_or(IsingChain::DEFECT);
            chain.longitudinal = vec![h; n];
            chain.longitudinal[0] += defect;
            let list = |name: &str,
                        v: &Option<Vec<f64>>,
                        len: usize|
             -> Result<Option<Vec<f64>>, ConfigError> {
                match v {
                    Some(v) if v.len() != len => Err(ConfigError::new(
                        format!("model.environment.{name}"),
                        format!("expected {len} entries"),
                    )),
                    Some(v) => Ok(Some(v.clone())),
                    None => Ok(None),
                }
            };
            if let Some(v) = list("couplings", &env.couplings, n - 1)? {
                chain.couplings = v;
            }
            if let Some(v) = list("transverse", &env.transverse, n)? {
                chain.transverse = v;
            }
            if let Some(v) = list("longitudinal", &env.longitudinal, n)? {
                chain.longitudinal = v;
            }
            chain.disorder = match (env.disorder_seed, env.disorder_amplitude) {
                (Some(seed), Some(amplitude)) => Some(Disorder {
                    seed,
                    amplitude: finite("model.environment.disorder_amplitude", amplitude)?,
                }),
                (None, Some(a)) if a != 0.0 => {
                    return Err(ConfigError::missing("model.environment.disorder_seed"))
                }
                _ => None,
            };
            EnvironmentSpec::Chain(chain)
        }
        "explicit" => {
            let m = env
                .matrix
                .as_ref()
                .ok_or_else(|| ConfigError::missing("model.environment.matrix"))?;
            EnvironmentSpec::Explicit(matrix(
                "model.environment.matrix",
                m,
                env.matrix_imag.as_ref(),
            )?)
        }
        other => {
            return Err(ConfigError::new(
                "model.environment.kind",
                format!("unknown kind `{other}`"),
            ))
        }
    };
    let n_sites = environment.n_sites();

    if raw.interaction.is_empty() {
        return Err(ConfigError::missing("model.interaction"));
    }
    let mut terms = Vec::with_capacity(raw.interaction.len());
    for (k, t) in raw.interaction.iter().enumerate() {
        let f = |name: &str| format!("model.interaction[{k}].{name}");
        let system_op = match (&t.system, &t.system_matrix) {
            (Some(name), None) => {
                if d_s != 2 {
                    return Err(ConfigError::new(
                        f("system"),
                        "Pauli names need a two-level system",
                    ));
                }
                rdm_lab_core::linalg::pauli(axis(&f("system"), name)?)
            }
            (None, Some(m)) => matrix(&f("system_matrix"), m, t.system_matrix_imag.as_ref())?,
            (Some(_), Some(_)) => {
                return Err(ConfigError::new(
                    f("system"),
                    "give either system or system_matrix",
                ))
            }
            (None, None) => return Err(ConfigError::missing(&f("system"))),
        };
        if system_op.nrows() != d_s {
            return Err(ConfigError::new(
                f("system_matrix"),
                format!("expected a {d_s}x{d_s} matrix"),
            ));
        }
        let env_op = match t.env.as_deref().unwrap_or("pauli") {
            "identity" => EnvOperatorSpec::Identity,
            "pauli" => {
                let site = t.site.ok_or_else(|| ConfigError::missing(&f("site")))?;
                let ax = axis(
                    &f("axis"),
                    t.axis
                        .as_deref()
                        .ok_or_else(|| ConfigError::missing(&f("axis")))?,
                )?;
                match n_sites {
                    Some(n) if site < n => {}
                    _ => return Err(ConfigError::new(f("site"), "site outside the chain")),
                }
                EnvOperatorSpec::Pauli { site, axis: ax }
            }
            "matrix" => {
                let m = t
                    .env_matrix
                    .as_ref()
                    .ok_or_else(|| ConfigError::missing(&f("env_matrix")))?;
                EnvOperatorSpec::Explicit(matrix(&f("env_matrix"), m, t.env_matrix_imag.as_ref())?)
            }
            other => {
                return Err(ConfigError::new(
                    f("env"),
                    format!("unknown environment operator `{other}`"),
                ))
            }
        };
        terms.push(InteractionTerm { system_op, env_op });
    }
    let mut spec = ModelSpec::new(h_s, environment, terms, 0.0)
        .with_label(raw.label.unwrap_or_else(|| "model".into()));
    spec.degeneracy_tolerance = raw
        .degeneracy_tolerance
        .unwrap_or(DEFAULT_DEGENERACY_TOLERANCE);
    spec.dimension_cap = raw.dimension_cap.unwrap_or(DEFAULT_DIMENSION_CAP);
    spec.validate_structure()
        .map_err(|e| ConfigError::new("model", e.to_string()))?;
    Ok(spec)
}

fn nonempty<T: Clone>(field: &str, v: Option<Vec<T>>) -> Result<Vec<T>, ConfigError> {
    match v {
        None => Err(ConfigError::missing(field)),
        Some(v) if v.is_empty() => Err(ConfigError::new(field, "list must not be empty")),
        Some(v) => Ok(v),
    }
}

fn build_analysis(raw: RawAnalysis, d_s: usize) -> Result<Analysis, ConfigError> {
    let lambdas = nonempty("analysis.lambdas", raw.lambdas)?;
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(ConfigError::new(
            "analysis.lambdas",
            format!("coupling {l} must be finite and >= 0"),
        ));
    }
    let epsilons = nonempty("analysis.epsilons", raw.epsilons)?;
    if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(ConfigError::new(
            "analysis.epsilons",
            format!("epsilon {e} must lie in (0, 1)"),
        ));
    }
    let deltas = nonempty("analysis.deltas", raw.deltas)?;
    if let Some(d) = deltas.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(ConfigError::new(
            "analysis.deltas",
            format!("shell width {d} must be > 0"),
        ));
    }
    let placements = match (raw.center_fractions, raw.energy_starts) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::new(
                "analysis.center_fractions",
                "give center_fractions or energy_starts, not both",
            ))
        }
        (Some(f), None) => {
            let f = nonempty("analysis.center_fractions", Some(f))?;
            if let Some(x) = f.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
                return Err(ConfigError::new(
                    "analysis.center_fractions",
                    format!("fraction {x} must lie in (0, 1)"),
                ));
            }
            f.into_iter().map(Placement::CenterFraction).collect()
        }
        (None, Some(e)) => {
            let e = nonempty("analysis.energy_starts", Some(e))?;
            e.iter()
                .map(|&x| finite("analysis.energy_starts", x))
                .collect::<Result<Vec<_>, _>>()?;
            e.into_iter().map(Placement::EnergyStart).collect()
        }
        (None, None) => return Err(ConfigError::missing("analysis.center_fractions")),
    };
    let middle_fraction = raw
        .middle_fraction
        .unwrap_or(rdm_lab_core::ensemble::DEFAULT_MIDDLE_FRACTION);
    if !(middle_fraction > 0.0 && middle_fraction <= 1.0) {
        return Err(ConfigError::new(
            "analysis.middle_fraction",
            "must lie in (0, 1]",
        ));
    }
    let samples = raw.samples.unwrap_or(0);
    if samples > 0 && raw.seed.is_none() {
        return Err(ConfigError::new(
            "analysis.seed",
            "missing required field (needed when samples > 0)",
        ));
    }
    if samples > 0 && samples < rdm_lab_core::typical::MIN_SAMPLES {
        return Err(ConfigError::new(
            "analysis.samples",
            format!(
                "need 0 or at least {} samples",
                rdm_lab_core::typical::MIN_SAMPLES
            ),
        ));
    }
    let tau_sw = raw.tau_sw.unwrap_or(DEFAULT_THRESHOLD);
    let tau_sq = raw.tau_sq.unwrap_or(DEFAULT_THRESHOLD);
    for (name, v) in [("analysis.tau_sw", tau_sw), ("analysis.tau_sq", tau_sq)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(ConfigError::new(name, "threshold must be > 0"));
        }
    }
    let renorm = match raw.renorm.as_deref().unwrap_or("eth_mean") {
        "zero" => RenormChoice::Zero,
        "eth_mean" => RenormChoice::EthMean,
        "custom" => {
            let m = raw
                .renorm_matrix
                .as_ref()
                .ok_or_else(|| ConfigError::missing("analysis.renorm_matrix"))?;
            let m = matrix("analysis.renorm_matrix", m, raw.renorm_matrix_imag.as_ref())?;
            if m.nrows() != d_s {
                return Err(ConfigError::new(
                    "analysis.renorm_matrix",
                    format!("expected a {d_s}x{d_s} matrix"),
                ));
            }
            RenormChoice::Custom(m)
        }
        other => {
            return Err(ConfigError::new(
                "analysis.renorm",
                format!("unknown candidate `{other}`"),
            ))
        }
    };
    Ok(Analysis {
        lambdas,
        epsilons,
        deltas,
        placements,
        middle_fraction,
        env_sizes: raw.env_sizes.unwrap_or_default(),
        tau_sw,
        tau_sq,
        samples,
        seed: raw.seed,
        renorm,
        dos_bins: raw.dos_bins.unwrap_or(40).max(1),
        eth_bins: raw.eth_bins.unwrap_or(8).max(1),
    })
}

fn build_output(raw: RawOutput) -> Result<Output, ConfigError> {
    let directory = raw
        .directory
        .ok_or_else(|| ConfigError::missing("output.directory"))?;
    let formats = raw
        .formats
        .unwrap_or_else(|| vec!["json".into(), "csv".into()]);
    let mut json = false;
    let mut csv = false;
    for f in &formats {
        match f.as_str() {
            "json" => json = true,
            "csv" => csv = true,
            other => {
                return Err(ConfigError::new(
                    "output.formats",
                    format!("unknown format `{other}`"),
                ))
            }
        }
    }
    if !json && !csv {
        return Err(ConfigError::new("output.formats", "list must not be empty"));
    }
    Ok(Output {
        directory,
        json,
        csv,
        cache_dir: raw.cache_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
label = "t"
[model.system]
gap = 1.0
[model.environment]
n_sites = 4
[[model.interaction]]
system = "x"
axis = "x"
site = 0
[analysis]
lambdas = [0.1]
epsilons = [0.05]
deltas = [1.0]
center_fractions = [0.5]
[output]
directory = "out"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.model.d_s(), 2);
        assert_eq!(c.model.d_e(), 16);
        assert_eq!(c.analysis.samples, 0);
        assert!(c.output.json && c.output.csv);
        let EnvironmentSpec::Chain(chain) = &c.model.environment else {
            panic!()
        };
        assert_eq!(*chain, IsingChain::defect(4));
    }

    #[test]
    fn missing_seed_is_named() {
        let text = MINIMAL.replace(
            "center_fractions = [0.5]",
            "center_fractions = [0.5]\nsamples = 40",
        );
        assert_eq!(parse(&text).unwrap_err().field, "analysis.seed");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (from, to, field) in [
            ("deltas = [1.0]", "deltas = [0.0]", "analysis.deltas"),
            ("epsilons = [0.05]", "epsilons = []", "analysis.epsilons"),
            ("site = 0", "site = 9", "model.interaction[0].site"),
            ("gap = 1.0", "", "model.system.gap"),
            ("directory = \"out\"", "", "output.directory"),
        ] {
            let err = parse(&MINIMAL.replace(from, to)).unwrap_err();
            assert_eq!(err.field, field, "{err}");
        }
        assert_eq!(
            parse(&MINIMAL.replace("[output]", "[output]\nbogus = 1"))
                .unwrap_err()
                .field,
            "config"
        );
    }

    #[test]
    fn resized_chain_keeps_defect() {
        let c = parse(MINIMAL).unwrap();
        let m = c.model_with_sites(6).unwrap();
        let EnvironmentSpec::Chain(chain) = &m.environment else {
            panic!()
        };
        assert_eq!(*chain, IsingChain::defect(6));
    }
}
