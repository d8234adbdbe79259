//! Patient discovery by file-name convention.
//!
//! A patient is a directory holding one file per modality. Both naming
//! schemes are recognized: `<id>_t1`, `_t1ce`, `_t2`, `_flair`, `_seg`
//! (brats2020) and `<id>-t1n`, `-t1c`, `-t2w`, `-t2f`, `-seg` (brats2025),
//! each with a `.nii`, `.nii.gz` or `.json` extension.

use std::path::{Path, PathBuf};

use infilmap_core::grid::{MultiModalVolume, ZoneGrid};
use infilmap_core::io::read_volume;
use infilmap_core::labelgen::Dataset;

use crate::error::{CliError, Stage};

const SCHEMES: [(Dataset, char, [&str; 4]); 2] = [
    (Dataset::Brats2020, '_', ["t1", "t1ce", "t2", "flair"]),
    (Dataset::Brats2025, '-', ["t1n", "t1c", "t2w", "t2f"]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct PatientFiles {
    pub name: String,
    pub dataset: Dataset,
    /// Canonical order t1, t1ce, t2, flair.
    pub modalities: [PathBuf; 4],
    pub seg: Option<PathBuf>,
}

fn stem(p: &Path) -> Option<String> {
    let n = p.file_name()?.to_str()?.to_ascii_lowercase();
    for ext in [".nii.gz", ".nii", ".json"] {
        if let Some(s) = n.strip_suffix(ext) {
            return Some(s.to_string());
        }
    }
    None
}

pub fn modality_file_name(dataset: Dataset, id: &str, modality: usize) -> String {
    let (_, sep, names) = SCHEMES.iter().find(|s| s.0 == dataset).expect("both datasets listed");
    format!("{id}{sep}{}.nii.gz", names[modality])
}

pub fn seg_file_name(dataset: Dataset, id: &str) -> String {
    let (_, sep, _) = SCHEMES.iter().find(|s| s.0 == dataset).expect("both datasets listed");
    format!("{id}{sep}seg.nii.gz")
}

pub fn discover_patient(dir: &Path) -> Result<PatientFiles, CliError> {
    let mut files: Vec<(PathBuf, String)> = std::fs::read_dir(dir)
        .map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| stem(&p).map(|s| (p, s)))
        .collect();
    files.sort();
    for (dataset, sep, names) in SCHEMES {
        let find = |suffix: &str| {
            let tail = format!("{sep}{suffix}");
            files.iter().find(|(_, s)| s.ends_with(&tail)).map(|(p, _)| p.clone())
        };
        let found: Vec<Option<PathBuf>> = names.iter().map(|n| find(n)).collect();
        if found.iter().all(Option::is_some) {
            let modalities: [PathBuf; 4] = std::array::from_fn(|i| found[i].clone().expect("checked"));
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("patient").to_string();
            return Ok(PatientFiles {
                name,
                dataset,
                modalities,
                seg: find("seg"),
            });
        }
    }
    Err(CliError::new(
        "io",
        format!("{}: no complete modality set (t1/t1ce/t2/flair or t1n/t1c/t2w/t2f)", dir.display()),
    ))
}

/// Patient directories directly under `root`, sorted by name.
pub fn discover_patients(root: &Path) -> Result<Vec<PatientFiles>, CliError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| CliError::new("io", format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        match discover_patient(&d) {
            Ok(p) => out.push(p),
            Err(e) => log::warn!("skipping {}: {}", d.display(), e.message),
        }
    }
    if out.is_empty() {
        return Err(CliError::new("io", format!("no patient directories under {}", root.display())));
    }
    Ok(out)
}

pub fn load_volume(paths: &[PathBuf; 4]) -> Result<MultiModalVolume, CliError> {
    let grids = paths
        .iter()
        .map(|p| read_volume(p).map(|g| g.to_f32()).stage("io"))
        .collect::<Result<Vec<_>, _>>()?;
    MultiModalVolume::new(grids.try_into().expect("four paths")).stage("io")
}

pub fn load_labels(path: &Path) -> Result<ZoneGrid, CliError> {
    read_volume(path).stage("io")?.to_labels().stage("io")
}

/// `--volume` accepts either one patient directory or four files in
/// canonical order.
pub fn resolve_volume(args: &[PathBuf]) -> Result<(MultiModalVolume, Option<PatientFiles>), CliError> {
    match args {
        [dir] if dir.is_dir() => {
            let p = discover_patient(dir)?;
            Ok((load_volume(&p.modalities)?, Some(p)))
        }
        [a, b, c, d] => Ok((load_volume(&[a.clone(), b.clone(), c.clone(), d.clone()])?, None)),
        _ => Err(CliError::invalid("--volume", format!("{} paths", args.len()), "one patient directory or four modality files")),
    }
}
