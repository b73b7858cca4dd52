//! Native on-disk format.
//!
//! A volume is a raw little-endian C-order payload plus a JSON sidecar named
//! after the payload with `.json` appended. Intensity payloads are `float32`,
//! label payloads are `uint8`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

pub const DTYPE_F32: &str = "float32";
pub const DTYPE_U8: &str = "uint8";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    /// `[V, H, W]`
    pub shape: [usize; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    pub subject_id: String,
}

impl VolumeHeader {
    fn element_size(&self) -> Option<usize> {
        match self.dtype.as_str() {
            DTYPE_F32 => Some(4),
            DTYPE_U8 => Some(1),
            _ => None,
        }
    }

    fn payload_len(&self) -> Option<usize> {
        let [v, h, w] = self.shape;
        self.element_size().map(|s| v * h * w * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Path to the intensity payload, relative to the manifest directory
    /// unless absolute.
    pub volume: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

/// `<payload>.json`, so an image and its labels never share a sidecar.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut name = payload.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn read_header(payload: &Path) -> Result<VolumeHeader> {
    let path = sidecar_path(payload);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))
}

fn write_header(payload: &Path, header: &VolumeHeader) -> Result<()> {
    let path = sidecar_path(payload);
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads header and payload and checks they agree.
fn read_payload(payload: &Path, dtype: &str) -> Result<(VolumeHeader, Vec<u8>)> {
    let header = read_header(payload)?;
    if header.dtype != dtype {
        return Err(Error::parse(
            payload,
            format!("expected dtype {dtype:?}, header says {:?}", header.dtype),
        ));
    }
    let bytes = fs::read(payload).map_err(|e| Error::io(payload, e))?;
    let expected = header.payload_len().expect("dtype checked above");
    if bytes.len() != expected {
        return Err(Error::parse(
            payload,
            format!(
                "header shape {:?} needs {expected} bytes, payload has {}",
                header.shape,
                bytes.len()
            ),
        ));
    }
    Ok((header, bytes))
}

/// Reads a volume exactly as stored (no normalization, no labels).
pub fn read_volume_raw(payload: &Path) -> Result<Volume> {
    let (header, bytes) = read_payload(payload, DTYPE_F32)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let [v, h, w] = header.shape;
    let voxels = Array3::from_shape_vec((v, h, w), data).expect("length checked");
    Volume::new(header.subject_id, voxels, header.spacing, None)
}

pub fn read_labels_raw(payload: &Path) -> Result<Array3<u8>> {
    let (header, bytes) = read_payload(payload, DTYPE_U8)?;
    let [v, h, w] = header.shape;
    Ok(Array3::from_shape_vec((v, h, w), bytes).expect("length checked"))
}

/// Writes intensities (payload + sidecar). Labels are not written.
pub fn write_volume(payload: &Path, volume: &Volume) -> Result<()> {
    let (v, h, w) = volume.voxels.dim();
    let mut bytes = Vec::with_capacity(v * h * w * 4);
    for x in volume.voxels.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(payload, bytes).map_err(|e| Error::io(payload, e))?;
    write_header(
        payload,
        &VolumeHeader {
            shape: [v, h, w],
            dtype: DTYPE_F32.into(),
            spacing: volume.spacing,
            subject_id: volume.subject_id.clone(),
        },
    )
}

pub fn write_labels(payload: &Path, subject_id: &str, labels: &Array3<u8>) -> Result<()> {
    let (v, h, w) = labels.dim();
    let bytes: Vec<u8> = labels.iter().copied().collect();
    fs::write(payload, bytes).map_err(|e| Error::io(payload, e))?;
    write_header(
        payload,
        &VolumeHeader {
            shape: [v, h, w],
            dtype: DTYPE_U8.into(),
            spacing: None,
            subject_id: subject_id.to_string(),
        },
    )
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses and eagerly validates a manifest. Returned entries carry resolved
/// paths.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    if manifest.num_classes == 0 {
        return Err(Error::parse(path, "num_classes must be positive"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    for entry in &mut manifest.entries {
        if !seen.insert(entry.subject_id.clone()) {
            return Err(Error::DuplicateSubject(entry.subject_id.clone()));
        }
        entry.volume = resolve(base, &entry.volume);
        entry.labels = entry.labels.as_ref().map(|l| resolve(base, l));
        check_loadable(entry, &entry.volume, DTYPE_F32)?;
        if let Some(labels) = &entry.labels {
            check_loadable(entry, labels, DTYPE_U8)?;
        }
    }
    Ok(manifest)
}

/// Header and payload size check, without reading the payload.
fn check_loadable(entry: &ManifestEntry, payload: &Path, dtype: &str) -> Result<()> {
    let fail = |message: String| Error::Manifest {
        subject_id: entry.subject_id.clone(),
        message,
    };
    let header = read_header(payload).map_err(|e| fail(e.to_string()))?;
    if header.dtype != dtype {
        return Err(fail(format!(
            "{}: dtype {:?}, expected {dtype:?}",
            payload.display(),
            header.dtype
        )));
    }
    let meta = fs::metadata(payload)
        .map_err(|e| fail(format!("{}: {e}", payload.display())))?;
    let expected = header.payload_len().unwrap_or(0) as u64;
    if meta.len() != expected {
        return Err(fail(format!(
            "{}: header shape {:?} needs {expected} bytes, payload has {}",
            payload.display(),
            header.shape,
            meta.len()
        )));
    }
    Ok(())
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes every volume (and its labels, if any) under `dir` and a
/// `manifest.json` with relative paths. Returns the manifest path.
pub fn write_dataset(dir: &Path, volumes: &[Volume], num_classes: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(volumes.len());
    for vol in volumes {
        let image = PathBuf::from(format!("{}.img", vol.subject_id));
        write_volume(&dir.join(&image), vol)?;
        let labels = match &vol.labels {
            Some(l) => {
                let p = PathBuf::from(format!("{}.seg", vol.subject_id));
                write_labels(&dir.join(&p), &vol.subject_id, l)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            subject_id: vol.subject_id.clone(),
            volume: image,
            labels,
        });
    }
    let path = dir.join("manifest.json");
    write_manifest(
        &path,
        &DatasetManifest {
            num_classes,
            entries,
        },
    )?;
    Ok(path)
}

/// Loads one manifest entry: intensities are z-scored, labels attached.
pub fn load_volume(entry: &ManifestEntry) -> Result<Volume> {
    let mut volume = read_volume_raw(&entry.volume)?;
    if volume.subject_id != entry.subject_id {
        return Err(Error::Manifest {
            subject_id: entry.subject_id.clone(),
            message: format!(
                "header of {} names subject {:?}",
                entry.volume.display(),
                volume.subject_id
            ),
        });
    }
    if let Some(path) = &entry.labels {
        volume.labels = Some(read_labels_raw(path)?);
        volume.validate()?;
    }
    Ok(volume.normalized())
}
