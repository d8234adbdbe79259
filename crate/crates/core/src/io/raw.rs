//! JSON sidecar + raw little-endian payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{decode_payload, encode_payload, AnyGrid, DType, Element};
use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing, VoxelGrid};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: DType,
}

fn pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

pub fn read(path: &Path) -> Result<AnyGrid> {
    let (json, raw) = pair(path);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
        field: "sidecar",
        detail: e.to_string(),
    })?;
    let spacing = Spacing::from_array(header.spacing);
    if !spacing.is_valid() {
        return Err(Error::Format {
            field: "spacing",
            detail: format!("{:?}", header.spacing),
        });
    }
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    decode_payload(header.dtype, &bytes, Dims::from_array(header.dims), spacing, false)
}

pub fn write<T: Element>(grid: &VoxelGrid<T>, path: &Path) -> Result<()> {
    let (json, raw) = pair(path);
    let header = Sidecar {
        dims: grid.dims().to_array(),
        spacing: grid.spacing().to_array(),
        dtype: T::DTYPE,
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    std::fs::write(&raw, encode_payload(grid.data())).map_err(|e| Error::io(&raw, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::filled(Dims::new(2, 2, 2), Spacing::new(1.1, 0.3, 2.7), 1.25f64);
        let p = dir.path().join("v.json");
        write(&g, &p).unwrap();
        assert_eq!(read(&p).unwrap(), AnyGrid::F64(g));
    }

    #[test]
    fn unknown_sidecar_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        std::fs::write(&p, r#"{"dims":[1,1,1],"spacing":[1,1,1],"dtype":"u8","extra":1}"#).unwrap();
        std::fs::write(dir.path().join("v.raw"), [0u8]).unwrap();
        assert!(matches!(read(&p), Err(Error::Format { field: "sidecar", .. })));
    }

    #[test]
    fn truncated_payload_is_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        std::fs::write(&p, r#"{"dims":[2,2,2],"spacing":[1,1,1],"dtype":"i16"}"#).unwrap();
        std::fs::write(dir.path().join("v.raw"), [0u8; 15]).unwrap();
        assert!(matches!(read(&p), Err(Error::Size(_))));
    }
}
