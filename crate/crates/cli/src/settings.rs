//! Flag, environment, config-file and default layering.
//!
//! Each setting is taken from the first layer that has it: command-line
//! flag, then the environment (output directory only), then the `--config`
//! file, then the subcommand's defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use refattn::tensor::rand_matrix;
use refattn::{AggregationMode, AttnConfig, GatePlacement, GatingMode, Matrix, RAWeights, Rng};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Overrides `--out-dir` and the config file, but not an explicit flag.
pub const OUT_DIR_ENV: &str = "REFATTN_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "refattn-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Csv,
    #[default]
    Table,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat TOML file whose keys are the long flag names, e.g. `L-src = 64`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source token count.
    #[arg(long = "L-src")]
    pub l_src: Option<usize>,
    /// Reference token count.
    #[arg(long = "L-ref")]
    pub l_ref: Option<usize>,
    /// Model width.
    #[arg(long = "d")]
    pub d: Option<usize>,
    /// Number of summary tokens.
    #[arg(long = "M")]
    pub m: Option<usize>,
    /// Attention heads; must divide d.
    #[arg(long)]
    pub heads: Option<usize>,
    /// vanilla, global, explicit or aicg.
    #[arg(long)]
    pub gating: Option<GatingMode>,
    /// before-zero-linear or before-to-out.
    #[arg(long)]
    pub placement: Option<GatePlacement>,
    /// logits or softmax-output.
    #[arg(long)]
    pub aggregation: Option<AggregationMode>,
    /// Seed for inputs and weights.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [env: REFATTN_OUT_DIR] [default: refattn-out].
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// What to print on stdout; JSON and CSV files are always written.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Half-width of the uniform draw for `zero_linear`; 0 keeps its zero init.
    #[arg(long = "zero-linear-scale")]
    pub zero_linear_scale: Option<f64>,
    /// Source features as a headerless CSV matrix, one token per row.
    #[arg(long = "src-features")]
    pub src_features: Option<PathBuf>,
    /// Reference features as a headerless CSV matrix, one token per row.
    #[arg(long = "ref-features")]
    pub ref_features: Option<PathBuf>,
}

/// Every key a config file may set.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(rename = "L-src")]
    pub l_src: Option<usize>,
    #[serde(rename = "L-ref")]
    pub l_ref: Option<usize>,
    pub d: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub heads: Option<usize>,
    pub gating: Option<GatingMode>,
    pub placement: Option<GatePlacement>,
    pub aggregation: Option<AggregationMode>,
    pub seed: Option<u64>,
    #[serde(rename = "out-dir")]
    pub out_dir: Option<PathBuf>,
    pub format: Option<Format>,
    #[serde(rename = "zero-linear-scale")]
    pub zero_linear_scale: Option<f64>,
    #[serde(rename = "src-features")]
    pub src_features: Option<PathBuf>,
    #[serde(rename = "ref-features")]
    pub ref_features: Option<PathBuf>,
    #[serde(rename = "paper-base")]
    pub paper_base: Option<f64>,
    pub asymptotic: Option<bool>,
    #[serde(rename = "L")]
    pub l: Option<u64>,
    pub sizes: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub warmup: Option<usize>,
    #[serde(rename = "memory-cap-bytes")]
    pub memory_cap_bytes: Option<u64>,
    #[serde(rename = "fd-step")]
    pub fd_step: Option<f64>,
    pub pgm: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))
    }
}

/// Settings after layering, plus any feature matrices loaded from disk.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub attn: AttnConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: Format,
    pub zero_linear_scale: f64,
    pub src_features: Option<Matrix>,
    pub ref_features: Option<Matrix>,
    /// The parsed config file, for subcommand-specific keys.
    pub file: FileConfig,
}

impl RunConfig {
    /// Layers `flags` over the environment, the config file and `defaults`.
    pub fn resolve(flags: &CommonArgs, defaults: AttnConfig) -> CliResult<Self> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let env_out = std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);

        let l_src = flags.l_src.or(file.l_src);
        let l_ref = flags.l_ref.or(file.l_ref);
        let d = flags.d.or(file.d);
        let mut attn = AttnConfig {
            l_src: l_src.unwrap_or(defaults.l_src),
            l_ref: l_ref.unwrap_or(defaults.l_ref),
            d: d.unwrap_or(defaults.d),
            heads: flags.heads.or(file.heads).unwrap_or(defaults.heads),
            m: flags.m.or(file.m).unwrap_or(defaults.m),
            gating_mode: flags.gating.or(file.gating).unwrap_or(defaults.gating_mode),
            gate_placement: flags
                .placement
                .or(file.placement)
                .unwrap_or(defaults.gate_placement),
            aggregation_mode: flags
                .aggregation
                .or(file.aggregation)
                .unwrap_or(defaults.aggregation_mode),
        };

        let src_features = flags
            .src_features
            .as_ref()
            .or(file.src_features.as_ref())
            .map(|p| load_features(p))
            .transpose()?;
        let ref_features = flags
            .ref_features
            .as_ref()
            .or(file.ref_features.as_ref())
            .map(|p| load_features(p))
            .transpose()?;
        // Loaded features fix the shapes they imply unless a layer set them too.
        let mut d_from = d.map(|_| "d");
        if let Some(m) = &src_features {
            attn.l_src = agree("L-src", l_src, m.rows())?;
            attn.d = agree("d", d, m.cols())?;
            d_from = Some("src-features");
        }
        if let Some(m) = &ref_features {
            attn.l_ref = agree("L-ref", l_ref, m.rows())?;
            attn.d = match d_from {
                Some(from) if attn.d != m.cols() => {
                    return Err(CliError::Usage(format!(
                        "ref-features has {} columns but {from} sets d = {}",
                        m.cols(),
                        attn.d
                    )))
                }
                _ => m.cols(),
            };
        }
        attn.validate()?;

        let zero_linear_scale = flags
            .zero_linear_scale
            .or(file.zero_linear_scale)
            .unwrap_or(0.0);
        if !(zero_linear_scale >= 0.0 && zero_linear_scale.is_finite()) {
            return Err(CliError::Usage(format!(
                "zero-linear-scale must be finite and non-negative, got {zero_linear_scale}"
            )));
        }
        Ok(Self {
            attn,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            out_dir: flags
                .out_dir
                .clone()
                .or(env_out)
                .or(file.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            format: flags.format.or(file.format).unwrap_or_default(),
            zero_linear_scale,
            src_features,
            ref_features,
            file,
        })
    }

    /// Seeded features (unless loaded) and freshly initialized weights.
    pub fn problem(&self) -> CliResult<(Matrix, Matrix, RAWeights)> {
        let cfg = &self.attn;
        let mut rng = Rng::new(self.seed);
        let h_src = match &self.src_features {
            Some(m) => m.clone(),
            None => rand_matrix(cfg.l_src, cfg.d, &mut rng, 1.0)?,
        };
        let h_ref = match &self.ref_features {
            Some(m) => m.clone(),
            None => rand_matrix(cfg.l_ref, cfg.d, &mut rng, 1.0)?,
        };
        let w = RAWeights::init(cfg, &mut rng)?
            .with_random_zero_linear(&mut rng, self.zero_linear_scale)?;
        Ok((h_src, h_ref, w))
    }
}

fn agree(name: &str, set: Option<usize>, found: usize) -> CliResult<usize> {
    match set {
        Some(v) if v != found => Err(CliError::Usage(format!(
            "{name} is set to {v} but the features file implies {found}"
        ))),
        _ => Ok(found),
    }
}

/// Reads a headerless CSV of numbers into a matrix.
pub fn load_features(path: &Path) -> CliResult<Matrix> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let bad = |msg: String| CliError::Usage(format!("{}: {msg}", path.display()));
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => bad(format!("{other:?}")),
        })?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("row {}: `{field}` is not a finite number", i + 1)))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad("no rows".into()));
    }
    Matrix::from_rows(&rows).map_err(|e| bad(e.to_string()))
}
