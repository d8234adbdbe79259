//! `infilmap` command-line front end.

pub mod config;
pub mod error;
pub mod fusion_check;
pub mod patients;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use infilmap_core::ablation::{reports_to_csv, run_ablation, AblationCase, AblationConfig, AblationSettings};
use infilmap_core::grid::{MultiModalVolume, ZoneGrid};
use infilmap_core::io::{read_volume, write_volume};
use infilmap_core::labelgen::{generate_zones, parse_brats_mask, zone_summary, Dataset};
use infilmap_core::losses::gradcheck::check_gradients;
use infilmap_core::metrics::{evaluate_zones, MetricsReport, CSV_HEADER};
use infilmap_core::netref::{FeatureMap, InfiltrNet};
use infilmap_core::par;
use infilmap_core::phantom::{generate_phantom, PhantomSpec};
use infilmap_core::pipeline::{
    argmax_zones, evaluate_patient, infer_volume, occlusion_map, postprocess, zscore_normalize, OcclusionConfig, Predictor,
};
use infilmap_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

pub use config::{load_config, Overrides, RunConfig};
pub use error::{CliError, Stage};

use patients::{discover_patients, load_labels, load_volume, modality_file_name, resolve_volume, seg_file_name};

/// Relative-error bound the gradient self-check must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Absolute bound for the fusion self-check.
pub const FUSION_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "infilmap", version, about = "Glioma infiltration-risk zone mapping")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Derive the three-zone risk map from a segmentation.
    Labelgen {
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        flair: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the JSON summary here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Score a predicted zone map against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Predict a zone map with the reference network.
    Infer {
        /// One patient directory or four modality files (t1, t1ce, t2, flair).
        #[arg(long, num_args = 1..=4, required = true)]
        volume: Vec<PathBuf>,
        /// Parameter manifest; random weights from the seed otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the class probabilities (4 files, suffix _p<k>).
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Multi-scale occlusion sensitivity map.
    Occlusion {
        #[arg(long, num_args = 1..=4, required = true)]
        volume: Vec<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Target region: non-zero voxels of this file. Defaults to the
        /// predicted target-class voxels.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic patient.
    Phantom {
        /// Phantom spec JSON; a centered spherical tumor otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Extent in voxels of the default spec (2 mm isotropic).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "phantom")]
        name: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of the loss gradients.
    CheckGrads {
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        fixtures: usize,
        #[arg(long, default_value_t = 20)]
        coords: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the fusion block with a step-by-step re-derivation.
    CheckFusion {
        #[arg(long, default_value_t = 10)]
        fixtures: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every patient directory under a root.
    Report {
        #[arg(long)]
        patients: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also run the six ablation configurations.
        #[arg(long)]
        ablation: bool,
    },
    /// Write a randomly initialized parameter manifest.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn stage(&self) -> &'static str {
        match self {
            Command::Labelgen { .. } => "labelgen",
            Command::Eval { .. } => "metrics",
            Command::Infer { .. } => "inference",
            Command::Occlusion { .. } => "occlusion",
            Command::Phantom { .. } => "phantom",
            Command::CheckGrads { .. } => "losses",
            Command::CheckFusion { .. } => "netref",
            Command::Report { .. } => "report",
            Command::InitWeights { .. } => "netref",
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn write_grid<T: infilmap_core::io::Element>(grid: &infilmap_core::VoxelGrid<T>, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    }
    write_volume(grid, path).stage("io")
}

fn network(cfg: &RunConfig, weights: Option<&Path>) -> Result<InfiltrNet, CliError> {
    match weights {
        Some(p) => InfiltrNet::load(p).stage("netref"),
        None => InfiltrNet::new(cfg.model.clone(), cfg.ablation.branch, cfg.seed).stage("netref"),
    }
}

/// Zones from a segmentation and FLAIR. `Ok(None)` when the segmentation
/// holds no tumor.
pub fn zones_for(seg: &ZoneGrid, flair: &infilmap_core::VoxelGrid<f32>, dataset: Dataset) -> Result<Option<ZoneGrid>, CliError> {
    seg.ensure_same_dims(flair, "segmentation vs FLAIR").stage("labelgen")?;
    let regions = parse_brats_mask(seg, dataset.vocabulary()).stage("labelgen")?;
    let brain = flair.map(|&v| v != 0.0);
    match generate_zones(&regions, &brain) {
        Ok(z) => Ok(Some(z)),
        Err(Error::NoTumor) => Ok(None),
        Err(e) => Err(CliError::new("labelgen", e.to_string())),
    }
}

fn predict_zones(volume: &MultiModalVolume, net: &dyn Predictor, cfg: &RunConfig) -> Result<(FeatureMap, ZoneGrid), CliError> {
    let input = FeatureMap::from_volume(&zscore_normalize(volume));
    let probs = infer_volume(&input, net, &cfg.infer_config()).stage("inference")?;
    let raw = argmax_zones(&probs, volume.spacing()).stage("inference")?;
    let zones = if cfg.ablation.postproc { postprocess(&raw, &cfg.postprocess) } else { raw };
    Ok((probs, zones))
}

#[derive(Serialize)]
struct PatientRow {
    patient: String,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct Skipped {
    patient: String,
    reason: String,
}

fn mean_csv_row(reports: &[&MetricsReport]) -> String {
    let rows: Vec<Vec<String>> = reports.iter().map(|r| r.csv_row().split(',').map(str::to_string).collect()).collect();
    let cols = rows.first().map_or(0, Vec::len);
    (0..cols)
        .map(|c| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[c].parse::<f64>().ok()).collect();
            if vals.is_empty() {
                "NA".to_string()
            } else {
                format!("{:.6}", vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Execute one command; returns the JSON summary printed on stdout.
pub fn run(cfg: &RunConfig, command: &Command) -> Result<Value, CliError> {
    match command {
        Command::Labelgen { seg, flair, out, summary } => {
            let seg = load_labels(seg)?;
            let flair = read_volume(flair).stage("io")?.to_f32();
            let Some(zones) = zones_for(&seg, &flair, cfg.dataset)? else {
                log::warn!("patient skipped: segmentation holds no tumor");
                return Ok(json!({"skipped": true, "reason": "no tumor"}));
            };
            write_grid(&zones, out)?;
            let v = serde_json::to_value(zone_summary(&zones)).stage("io")?;
            if let Some(p) = summary {
                write_text(p, &to_json(&v))?;
            }
            Ok(v)
        }
        Command::Eval { pred, truth, out, csv } => {
            let pred = load_labels(pred)?;
            let truth = load_labels(truth)?;
            let report = evaluate_zones(&pred, &truth).stage("metrics")?;
            if let Some(p) = out {
                write_text(p, &to_json(&report))?;
            }
            if let Some(p) = csv {
                write_text(p, &report.to_csv())?;
            }
            serde_json::to_value(&report).stage("io")
        }
        Command::Infer { volume, weights, out, probs } => {
            let (vol, _) = resolve_volume(volume)?;
            let net = network(cfg, weights.as_deref())?;
            let (p, zones) = predict_zones(&vol, &net, cfg)?;
            write_grid(&zones, out)?;
            if let Some(base) = probs {
                let stem = base.to_string_lossy().trim_end_matches(".nii.gz").to_string();
                let n = p.spatial_len();
                for k in 0..4 {
                    let data: Vec<f32> = p.channel(0, k).iter().map(|&v| v as f32).collect();
                    let g = infilmap_core::VoxelGrid::new(vol.dims(), vol.spacing(), data).stage("inference")?;
                    debug_assert_eq!(g.len(), n);
                    write_grid(&g, Path::new(&format!("{stem}_p{k}.nii.gz")))?;
                }
            }
            serde_json::to_value(zone_summary(&zones)).stage("io")
        }
        Command::Occlusion { volume, weights, target, scales, stride, out } => {
            let (vol, _) = resolve_volume(volume)?;
            let net = network(cfg, weights.as_deref())?;
            let occ = OcclusionConfig {
                scales: scales.clone().unwrap_or_else(|| cfg.occlusion.scales.clone()),
                stride: stride.unwrap_or(cfg.occlusion.stride),
                ..cfg.occlusion.clone()
            };
            let input = FeatureMap::from_volume(&zscore_normalize(&vol));
            let infer_cfg = cfg.infer_config();
            let infer = |x: &FeatureMap| infer_volume(x, &net, &infer_cfg);
            let target = match target {
                Some(p) => read_volume(p).stage("io")?.to_labels().stage("io")?.map(|&v| v != 0),
                None => {
                    let (_, z) = predict_zones(&vol, &net, cfg)?;
                    z.map(|&v| v == occ.target_class)
                }
            };
            let map = occlusion_map(&input, &infer, &target, &occ).stage("occlusion")?;
            write_grid(&map.map(|&v| v as f32), out)?;
            let max = map.data().iter().copied().fold(0.0, f64::max);
            Ok(json!({"target_voxels": target.count_true(), "scales": occ.scales, "stride": occ.stride, "max": max}))
        }
        Command::Phantom { spec, size, name, out_dir } => {
            let spec: PhantomSpec = match spec {
                Some(p) => serde_json::from_str(&config::read_text(p)?).map_err(|e| CliError::new("phantom", format!("spec: {e}")))?,
                None => {
                    let mut s = PhantomSpec::spherical([*size; 3], [2.0; 3], *size as f64 / 8.0, *size as f64 / 5.0, cfg.seed);
                    s.dataset = cfg.dataset;
                    s
                }
            };
            let p = generate_phantom(&spec).stage("phantom")?;
            for (m, g) in p.volume.modalities().iter().enumerate() {
                write_grid(g, &out_dir.join(modality_file_name(spec.dataset, name, m)))?;
            }
            write_grid(&p.seg, &out_dir.join(seg_file_name(spec.dataset, name)))?;
            write_grid(&p.zones, &out_dir.join("oracle_zones.nii.gz"))?;
            write_text(&out_dir.join("spec.json"), &to_json(&spec))?;
            Ok(json!({"dims": spec.dims, "dataset": spec.dataset, "zones": zone_summary(&p.zones)}))
        }
        Command::CheckGrads { size, fixtures, coords, out } => {
            let r = check_gradients(cfg.seed, *size, *fixtures, *coords, &cfg.effective_loss()).stage("losses")?;
            let v = serde_json::to_value(&r).stage("io")?;
            if let Some(p) = out {
                write_text(p, &to_json(&v))?;
            }
            if r.max_relative_error() >= GRAD_TOLERANCE {
                return Err(CliError::new(
                    "losses",
                    format!("max relative error {} >= {GRAD_TOLERANCE}", r.max_relative_error()),
                ));
            }
            Ok(v)
        }
        Command::CheckFusion { fixtures, out } => {
            let r = fusion_check::check_fusion(cfg.seed, *fixtures).stage("netref")?;
            let v = serde_json::to_value(&r).stage("io")?;
            if let Some(p) = out {
                write_text(p, &to_json(&v))?;
            }
            if !r.passed(FUSION_TOLERANCE) {
                return Err(CliError::new("netref", format!("fusion deviates: {r:?}")));
            }
            Ok(v)
        }
        Command::Report { patients, weights, out_dir, ablation } => report(cfg, patients, weights.as_deref(), out_dir, *ablation),
        Command::InitWeights { out } => {
            let net = network(cfg, None)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
            }
            net.save(out).stage("io")?;
            Ok(json!({"parameters": net.params().len(), "values": net.params().num_values(), "seed": cfg.seed}))
        }
    }
}

struct Case {
    name: String,
    volume: MultiModalVolume,
    truth: Option<ZoneGrid>,
}

fn report(cfg: &RunConfig, root: &Path, weights: Option<&Path>, out_dir: &Path, ablation: bool) -> Result<Value, CliError> {
    let found = discover_patients(root)?;
    let net = network(cfg, weights)?;
    let cases = par::try_map_range(found.len(), |i| {
        let p = &found[i];
        let volume = load_volume(&p.modalities)?;
        let truth = match &p.seg {
            Some(s) => zones_for(&load_labels(s)?, volume.flair(), p.dataset)?,
            None => None,
        };
        Ok::<_, CliError>(Case {
            name: p.name.clone(),
            volume,
            truth,
        })
    })?;
    let mut skipped = Vec::new();
    let mut scored = Vec::new();
    for c in &cases {
        match &c.truth {
            Some(t) => scored.push((c, t)),
            None => {
                log::warn!("patient {} skipped: no tumor or no segmentation", c.name);
                skipped.push(Skipped {
                    patient: c.name.clone(),
                    reason: "no tumor or no segmentation".into(),
                });
            }
        }
    }
    let infer = cfg.infer_config();
    let results = par::try_map_range(scored.len(), |i| {
        let (c, t) = scored[i];
        evaluate_patient(&c.volume, t, &net, &infer, &cfg.postprocess, cfg.eval_flags()).stage("report")
    })?;
    let mut rows = Vec::new();
    let mut csv = format!("patient,{CSV_HEADER}\n");
    for ((c, _), r) in scored.iter().zip(&results) {
        write_grid(&r.zones, &out_dir.join(&c.name).join("zones.nii.gz"))?;
        write_text(&out_dir.join(&c.name).join("metrics.json"), &to_json(&r.report))?;
        csv.push_str(&format!("{},{}\n", c.name, r.report.csv_row()));
        rows.push(PatientRow {
            patient: c.name.clone(),
            metrics: r.report.clone(),
        });
    }
    if !rows.is_empty() {
        let refs: Vec<&MetricsReport> = rows.iter().map(|r| &r.metrics).collect();
        csv.push_str(&format!("mean,{}\n", mean_csv_row(&refs)));
    }
    write_text(&out_dir.join("report.csv"), &csv)?;
    let summary = json!({"patients": rows, "skipped": skipped});
    write_text(&out_dir.join("report.json"), &to_json(&summary))?;
    if ablation {
        let cases: Vec<AblationCase> = scored
            .iter()
            .map(|(c, t)| AblationCase {
                name: c.name.clone(),
                volume: c.volume.clone(),
                truth: (*t).clone(),
            })
            .collect();
        let settings = AblationSettings {
            model: cfg.model.clone(),
            seed: cfg.seed,
            infer: infer.clone(),
            postprocess: cfg.postprocess.clone(),
            loss: cfg.loss.clone(),
        };
        let reports = run_ablation(&cases, &AblationConfig::standard(), &settings).stage("report")?;
        write_text(&out_dir.join("ablation.json"), &to_json(&reports))?;
        write_text(&out_dir.join("ablation.csv"), &reports_to_csv(&reports))?;
    }
    Ok(json!({"scored": rows.len(), "skipped": skipped.len()}))
}

/// Install the global worker pool; a no-op if one already exists.
pub fn init_threads(cfg: &RunConfig) {
    if let Some(n) = cfg.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Resolve the configuration, run the command, and return what goes to
/// stdout.
pub fn main_with(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(&cli.overrides)?;
    if cli.overrides.dump_config {
        return Ok(to_json(&cfg));
    }
    init_threads(&cfg);
    Ok(to_json(&run(&cfg, &cli.command)?))
}
