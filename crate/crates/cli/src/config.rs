use std::path::Path;

use clap::Args;
use infilmap_core::labelgen::Dataset;
use infilmap_core::losses::LossWeights;
use infilmap_core::netref::{BranchMode, ModelConfig};
use infilmap_core::pipeline::{EvalFlags, InferConfig, OcclusionConfig, PatchConfig, PostProcConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Stage};

/// Inference settings apart from TTA, which lives with the ablation flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub window: usize,
    pub overlap: f64,
    pub batch: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let d = InferConfig::default();
        InferenceSection {
            window: d.window,
            overlap: d.overlap,
            batch: d.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub boundary_loss: bool,
    pub aux: bool,
    pub tta: bool,
    pub postproc: bool,
    pub branch: BranchMode,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            boundary_loss: true,
            aux: true,
            tta: true,
            postproc: true,
            branch: BranchMode::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub seed: u64,
    /// Worker threads; `None` defers to `INFILMAP_THREADS`, then all cores.
    pub threads: Option<usize>,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub inference: InferenceSection,
    pub postprocess: PostProcConfig,
    pub patches: PatchConfig,
    pub occlusion: OcclusionConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: Dataset::Brats2020,
            seed: 0,
            threads: None,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            inference: InferenceSection::default(),
            postprocess: PostProcConfig::default(),
            patches: PatchConfig::default(),
            occlusion: OcclusionConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            window: self.inference.window,
            overlap: self.inference.overlap,
            tta: self.ablation.tta,
            batch: self.inference.batch,
        }
    }

    pub fn eval_flags(&self) -> EvalFlags {
        EvalFlags {
            tta: self.ablation.tta,
            postproc: self.ablation.postproc,
        }
    }

    /// Loss weights with the ablated terms zeroed.
    pub fn effective_loss(&self) -> LossWeights {
        LossWeights {
            lambda_boundary: if self.ablation.boundary_loss { self.loss.lambda_boundary } else { 0.0 },
            lambda_aux: if self.ablation.aux { self.loss.lambda_aux } else { 0.0 },
            ..self.loss.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().stage("config")?;
        self.loss.validate().stage("config")?;
        self.infer_config().validate().stage("config")?;
        self.postprocess.validate().stage("config")?;
        if self.inference.window % 16 != 0 {
            return Err(CliError::invalid("inference.window", self.inference.window, "a positive multiple of 16"));
        }
        if self.patches.size == 0 || self.patches.per_volume == 0 {
            return Err(CliError::invalid(
                "patches",
                format!("size {} per_volume {}", self.patches.size, self.patches.per_volume),
                "integers >= 1",
            ));
        }
        if self.threads == Some(0) {
            return Err(CliError::invalid("threads", 0, "an integer >= 1"));
        }
        Ok(())
    }
}

/// Command-line overrides; any flag given wins over the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// Worker threads.
    #[arg(long, global = true, env = "INFILMAP_THREADS")]
    pub threads: Option<usize>,
    /// Seed for weights, phantoms and fixtures.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Label vocabulary: brats2020 or brats2025.
    #[arg(long, global = true)]
    pub dataset: Option<Dataset>,
    /// full, cnn-only or swin-only.
    #[arg(long, global = true)]
    pub branch: Option<BranchMode>,
    /// CNN base width C.
    #[arg(long, global = true)]
    pub base_filters: Option<usize>,
    /// Global-branch feature size F.
    #[arg(long, global = true)]
    pub swin_feature: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub lambda_boundary: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub lambda_aux: Option<f64>,
    /// Sliding-window edge in voxels (multiple of 16).
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(long, global = true)]
    pub overlap: Option<f64>,
    /// Smallest component kept by post-processing.
    #[arg(long, global = true)]
    pub min_component: Option<usize>,
    /// Enable (true) or disable (false) flip TTA.
    #[arg(long, global = true)]
    pub tta: Option<bool>,
    /// Enable (true) or disable (false) post-processing.
    #[arg(long, global = true)]
    pub postproc: Option<bool>,
    #[arg(long, global = true)]
    pub boundary_loss: Option<bool>,
    #[arg(long, global = true)]
    pub aux: Option<bool>,
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::new("config", format!("config: {e}")))
}

/// Resolve file then flags into a validated configuration.
pub fn load_config(o: &Overrides) -> Result<RunConfig, CliError> {
    let mut c = match &o.config {
        Some(p) => parse_config(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    if o.threads.is_some() {
        c.threads = o.threads;
    }
    set!(o.seed, c.seed);
    set!(o.dataset, c.dataset);
    set!(o.branch, c.ablation.branch);
    set!(o.base_filters, c.model.base_filters);
    set!(o.swin_feature, c.model.swin_feature);
    set!(o.lambda_boundary, c.loss.lambda_boundary);
    set!(o.lambda_aux, c.loss.lambda_aux);
    set!(o.window, c.inference.window);
    set!(o.overlap, c.inference.overlap);
    set!(o.min_component, c.postprocess.min_component_voxels);
    set!(o.tta, c.ablation.tta);
    set!(o.postproc, c.ablation.postproc);
    set!(o.boundary_loss, c.ablation.boundary_loss);
    set!(o.aux, c.ablation.aux);
    c.validate()?;
    Ok(c)
}

pub fn read_text(p: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))
}
