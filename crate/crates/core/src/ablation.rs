//! The six component ablations as runtime toggles.
//!
//! Every configuration runs the full evaluation path on a batch of
//! patients and also scores the training objective on the same
//! prediction, so disabling a loss term or an inference stage shows up in
//! the report even when the argmax does not move.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MultiModalVolume, ZoneGrid};
use crate::losses::{total_loss, LossWeights};
use crate::metrics::{MetricsReport, METRIC_NAMES};
use crate::netref::{BranchMode, FeatureMap, InfiltrNet, ModelConfig, INPUT_MULTIPLE};
use crate::pipeline::{evaluate_patient, infer_volume, zscore_normalize, EvalFlags, InferConfig, PostProcConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub name: String,
    pub branch: BranchMode,
    pub boundary_loss: bool,
    pub aux: bool,
    pub tta: bool,
    pub postproc: bool,
}

impl AblationConfig {
    fn new(name: &str, branch: BranchMode, boundary_loss: bool, aux: bool, tta: bool, postproc: bool) -> Self {
        AblationConfig {
            name: name.into(),
            branch,
            boundary_loss,
            aux,
            tta,
            postproc,
        }
    }

    pub fn full() -> Self {
        Self::new("full", BranchMode::Full, true, true, true, true)
    }

    /// full, no-boundary-loss, no-aux, no-tta-pp, cnn-only, swin-only.
    pub fn standard() -> [AblationConfig; 6] {
        [
            Self::full(),
            Self::new("no-boundary-loss", BranchMode::Full, false, true, true, true),
            Self::new("no-aux", BranchMode::Full, true, false, true, true),
            Self::new("no-tta-pp", BranchMode::Full, true, true, false, false),
            Self::new("cnn-only", BranchMode::CnnOnly, true, true, true, true),
            Self::new("swin-only", BranchMode::SwinOnly, true, true, true, true),
        ]
    }

    pub fn flags(&self) -> EvalFlags {
        EvalFlags {
            tta: self.tta,
            postproc: self.postproc,
        }
    }

    /// `base` with the disabled loss terms zeroed.
    pub fn loss_weights(&self, base: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_boundary: if self.boundary_loss { base.lambda_boundary } else { 0.0 },
            lambda_aux: if self.aux { base.lambda_aux } else { 0.0 },
            ..base.clone()
        }
    }
}

/// Objective terms, weighted as the configuration trains them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub dice_ce: f64,
    pub boundary: f64,
    pub aux: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientAblation {
    pub patient: String,
    pub metrics: MetricsReport,
    pub loss: LossSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub patients: Vec<PatientAblation>,
    /// Mean over patients of each patient's mean metrics (NA-aware).
    pub mean_metrics: [Option<f64>; 6],
    pub mean_loss: LossSummary,
}

impl AblationReport {
    /// Every metric slot is either a finite value or listed as undefined,
    /// and every loss term is finite.
    pub fn is_populated(&self) -> bool {
        !self.patients.is_empty()
            && self.patients.iter().all(|p| {
                let m = &p.metrics;
                let slots_ok = m.zones.len() == 3
                    && m.zones.iter().all(|z| {
                        z.values().iter().zip(METRIC_NAMES).all(|(v, name)| match v {
                            Some(x) => x.is_finite(),
                            None => m.undefined.contains(&format!("zone{}.{name}", z.zone)),
                        })
                    });
                let l = &p.loss;
                slots_ok && [l.dice_ce, l.boundary, l.aux, l.total].iter().all(|v| v.is_finite())
            })
    }
}

/// One patient: a normalized-ready volume and its labelgen zones.
#[derive(Clone, Debug)]
pub struct AblationCase {
    pub name: String,
    pub volume: MultiModalVolume,
    pub truth: ZoneGrid,
}

#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub seed: u64,
    pub infer: InferConfig,
    pub postprocess: PostProcConfig,
    pub loss: LossWeights,
}

const LOG_FLOOR: f64 = 1e-12;

fn score_case(case: &AblationCase, net: &InfiltrNet, cfg: &AblationConfig, s: &AblationSettings) -> Result<PatientAblation> {
    let dims = case.volume.dims();
    if !dims.is_divisible_by(INPUT_MULTIPLE) {
        return Err(Error::Size(format!(
            "ablation patients must have extents divisible by {INPUT_MULTIPLE}, got {dims}"
        )));
    }
    let result = evaluate_patient(&case.volume, &case.truth, net, &s.infer, &s.postprocess, cfg.flags())?;
    let input = FeatureMap::from_volume(&zscore_normalize(&case.volume));
    let aux = net.forward_logits(&input)?.aux_logits;
    // score the pipeline's own probabilities so the inference toggles count
    let infer = InferConfig {
        tta: cfg.tta,
        ..s.infer.clone()
    };
    let probs = if cfg.tta == s.infer.tta {
        result.probabilities.clone()
    } else {
        infer_volume(&input, net, &infer)?
    };
    let logits = probs.map(|p| p.max(LOG_FLOOR).ln());
    let b = total_loss(&logits, &aux, &case.truth, &cfg.loss_weights(&s.loss))?;
    Ok(PatientAblation {
        patient: case.name.clone(),
        metrics: result.report,
        loss: LossSummary {
            dice_ce: b.dice_ce,
            boundary: b.boundary,
            aux: b.aux,
            total: b.total,
        },
    })
}

pub fn run_config(cases: &[AblationCase], cfg: &AblationConfig, s: &AblationSettings) -> Result<AblationReport> {
    if cases.is_empty() {
        return Err(Error::Invalid {
            key: "ablation.patients".into(),
            value: "0".into(),
            expected: "at least one patient".into(),
        });
    }
    let net = InfiltrNet::new(s.model.clone(), cfg.branch, s.seed)?;
    let patients = cases.iter().map(|c| score_case(c, &net, cfg, s)).collect::<Result<Vec<_>>>()?;
    let n = patients.len() as f64;
    let mean_metrics = std::array::from_fn(|k| {
        let vals: Vec<f64> = patients.iter().filter_map(|p| p.metrics.mean.values()[k]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    });
    let avg = |f: fn(&LossSummary) -> f64| patients.iter().map(|p| f(&p.loss)).sum::<f64>() / n;
    let mean_loss = LossSummary {
        dice_ce: avg(|l| l.dice_ce),
        boundary: avg(|l| l.boundary),
        aux: avg(|l| l.aux),
        total: avg(|l| l.total),
    };
    Ok(AblationReport {
        config: cfg.clone(),
        patients,
        mean_metrics,
        mean_loss,
    })
}

pub fn run_ablation(cases: &[AblationCase], configs: &[AblationConfig], s: &AblationSettings) -> Result<Vec<AblationReport>> {
    configs.iter().map(|c| run_config(cases, c, s)).collect()
}

/// CSV with one row per configuration: name, the metrics columns, then the
/// mean loss terms. Undefined values print as `NA`.
pub fn reports_to_csv(reports: &[AblationReport]) -> String {
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from("config,dsc,hd95_mm,iou,vs,sensitivity,precision,loss_dice_ce,loss_boundary,loss_aux,loss_total\n");
    for r in reports {
        let m: Vec<String> = r.mean_metrics.iter().map(|&v| fmt(v)).collect();
        let l = &r.mean_loss;
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.config.name,
            m.join(","),
            l.dice_ce,
            l.boundary,
            l.aux,
            l.total
        ));
    }
    out
}
