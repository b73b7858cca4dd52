//! Volumes, slices and datasets.
//!
//! Slicing is always along axis 0 (`z`). Volumes are stored as `(V, H, W)`
//! arrays of `f32` intensities, with an optional label volume of the same
//! shape holding integer class ids.

mod io;
mod phantom;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

pub use io::{
    load_manifest, load_volume, read_labels_raw, read_volume_raw, write_dataset, write_labels,
    write_manifest, write_volume, DatasetManifest, ManifestEntry, VolumeHeader,
};
pub use phantom::{make_phantom_dataset, phantom_dataset, PHANTOM_NUM_CLASSES};

/// Minimum in-plane extent of a volume.
pub const MIN_PLANE: usize = 8;

/// Variance floor used by the per-volume z-score.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    /// Intensities, shape `(V, H, W)`.
    pub voxels: Array3<f32>,
    /// Voxel spacing in millimetres, `[sz, sy, sx]`.
    pub spacing: Option<[f64; 3]>,
    pub labels: Option<Array3<u8>>,
}

impl Volume {
    pub fn new(
        subject_id: impl Into<String>,
        voxels: Array3<f32>,
        spacing: Option<[f64; 3]>,
        labels: Option<Array3<u8>>,
    ) -> Result<Self> {
        let volume = Volume {
            subject_id: subject_id.into(),
            voxels,
            spacing,
            labels,
        };
        volume.validate()?;
        Ok(volume)
    }

    fn invalid(&self, message: impl Into<String>) -> Error {
        Error::InvalidVolume {
            subject_id: self.subject_id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (v, h, w) = self.voxels.dim();
        if v < 2 {
            return Err(self.invalid(format!("needs at least 2 slices, got {v}")));
        }
        if h < MIN_PLANE || w < MIN_PLANE {
            return Err(self.invalid(format!(
                "in-plane size {h}x{w} is below {MIN_PLANE}x{MIN_PLANE}"
            )));
        }
        if let Some(pos) = self.voxels.iter().position(|x| !x.is_finite()) {
            return Err(self.invalid(format!("non-finite intensity at flat offset {pos}")));
        }
        if let Some(spacing) = self.spacing {
            if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(self.invalid(format!("spacing {spacing:?} must be positive")));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.dim() != self.voxels.dim() {
                return Err(self.invalid(format!(
                    "label shape {:?} differs from volume shape {:?}",
                    labels.dim(),
                    self.voxels.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
                return Err(self.invalid(format!(
                    "label {bad} outside [0, {num_classes})"
                )));
            }
        }
        Ok(())
    }

    /// Number of slices `V`.
    pub fn num_slices(&self) -> usize {
        self.voxels.len_of(Axis(0))
    }

    pub fn plane(&self) -> (usize, usize) {
        let (_, h, w) = self.voxels.dim();
        (h, w)
    }

    /// Per-volume z-score normalization with a variance floor.
    pub fn normalized(mut self) -> Self {
        zscore_in_place(&mut self.voxels);
        self
    }

    pub fn without_labels(&self) -> Volume {
        Volume {
            subject_id: self.subject_id.clone(),
            voxels: self.voxels.clone(),
            spacing: self.spacing,
            labels: None,
        }
    }

    pub fn slice(&self, index: usize) -> Result<SliceRecord> {
        slice_of(&self.subject_id, &self.voxels, index)
    }
}

pub(crate) fn zscore_in_place(voxels: &mut Array3<f32>) {
    let n = voxels.len() as f64;
    let mean = voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = voxels
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= VARIANCE_FLOOR {
        // Constant volume: everything sits at the mean.
        voxels.fill(0.0);
        return;
    }
    let inv_std = 1.0 / var.sqrt();
    voxels.mapv_inplace(|x| ((x as f64 - mean) * inv_std) as f32);
}

/// One 2D plane of a volume together with its position metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub subject_id: String,
    pub slice_index: usize,
    /// Slice count `V` of the parent volume.
    pub num_slices: usize,
    pub pixels: Array2<f32>,
}

fn slice_of(subject_id: &str, voxels: &Array3<f32>, index: usize) -> Result<SliceRecord> {
    let depth = voxels.len_of(Axis(0));
    if index >= depth {
        return Err(Error::SliceOutOfRange { index, depth });
    }
    Ok(SliceRecord {
        subject_id: subject_id.to_string(),
        slice_index: index,
        num_slices: depth,
        pixels: voxels.index_axis(Axis(0), index).to_owned(),
    })
}

/// Returns the `(H, W)` plane at `z = index`.
pub fn get_slice(volume: &Volume, index: usize) -> Result<SliceRecord> {
    volume.slice(index)
}

/// Label-free view of a volume handed to the pre-training path.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledVolume<'a> {
    pub subject_id: &'a str,
    pub voxels: &'a Array3<f32>,
}

impl UnlabeledVolume<'_> {
    pub fn num_slices(&self) -> usize {
        self.voxels.len_of(Axis(0))
    }

    pub fn slice(&self, index: usize) -> Result<SliceRecord> {
        slice_of(self.subject_id, self.voxels, index)
    }
}

/// A validated collection of volumes sharing a class count.
///
/// Label access goes through [`Dataset::labels`], which counts reads so the
/// pre-training path can be checked to never touch annotations.
#[derive(Debug)]
pub struct Dataset {
    volumes: Vec<Volume>,
    num_classes: usize,
    label_reads: AtomicUsize,
}

impl Dataset {
    pub fn new(volumes: Vec<Volume>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &volumes {
            if !seen.insert(v.subject_id.as_str()) {
                return Err(Error::DuplicateSubject(v.subject_id.clone()));
            }
            v.validate()?;
            v.validate_labels(num_classes)?;
        }
        Ok(Dataset {
            volumes,
            num_classes,
            label_reads: AtomicUsize::new(0),
        })
    }

    /// Loads and normalizes every entry of a manifest.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let volumes = manifest
            .entries
            .iter()
            .map(load_volume)
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(volumes, manifest.num_classes)
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.volumes.iter().map(|v| v.subject_id.clone()).collect()
    }

    pub fn index_of(&self, subject_id: &str) -> Option<usize> {
        self.volumes.iter().position(|v| v.subject_id == subject_id)
    }

    pub fn subject_id(&self, index: usize) -> &str {
        &self.volumes[index].subject_id
    }

    pub fn voxels(&self, index: usize) -> &Array3<f32> {
        &self.volumes[index].voxels
    }

    pub fn has_labels(&self, index: usize) -> bool {
        self.volumes[index].labels.is_some()
    }

    /// Label volume of subject `index`; every call is counted.
    pub fn labels(&self, index: usize) -> Option<&Array3<u8>> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.volumes[index].labels.as_ref()
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn unlabeled(&self) -> Vec<UnlabeledVolume<'_>> {
        self.volumes
            .iter()
            .map(|v| UnlabeledVolume {
                subject_id: &v.subject_id,
                voxels: &v.voxels,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(v: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((v, h, w), |(z, y, x)| (z * 100 + y * 10 + x) as f32)
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let vol = Volume::new("c", Array3::from_elem((3, 8, 8), 5.0), None, None)
            .unwrap()
            .normalized();
        assert!(vol.voxels.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zscore_has_zero_mean_unit_variance() {
        let vol = Volume::new("r", ramp(4, 8, 8), None, None).unwrap().normalized();
        let n = vol.voxels.len() as f64;
        let mean = vol.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = vol.voxels.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn get_slice_bounds_and_content() {
        let vol = Volume::new("s", ramp(20, 8, 8), None, None).unwrap();
        let first = get_slice(&vol, 0).unwrap();
        assert_eq!(first.slice_index, 0);
        assert_eq!(first.num_slices, 20);
        for idx in [0, 7, 19] {
            let s = get_slice(&vol, idx).unwrap();
            assert_eq!(s.pixels, vol.voxels.index_axis(Axis(0), idx));
        }
        assert!(matches!(
            get_slice(&vol, 20),
            Err(Error::SliceOutOfRange { index: 20, depth: 20 })
        ));
    }

    #[test]
    fn volume_invariants_rejected() {
        assert!(Volume::new("a", ramp(1, 8, 8), None, None).is_err());
        assert!(Volume::new("a", ramp(2, 7, 8), None, None).is_err());
        let mut bad = ramp(2, 8, 8);
        bad[[1, 2, 3]] = f32::NAN;
        let err = Volume::new("a", bad, None, None).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
        let labels = Array3::<u8>::zeros((2, 8, 9));
        assert!(Volume::new("a", ramp(2, 8, 8), None, Some(labels)).is_err());
    }

    #[test]
    fn dataset_counts_label_reads_only() {
        let labels = Array3::<u8>::zeros((2, 8, 8));
        let v1 = Volume::new("a", ramp(2, 8, 8), None, Some(labels.clone())).unwrap();
        let v2 = Volume::new("b", ramp(2, 8, 8), None, Some(labels)).unwrap();
        let ds = Dataset::new(vec![v1, v2], 2).unwrap();
        let views = ds.unlabeled();
        assert_eq!(views.len(), 2);
        assert_eq!(views[1].slice(1).unwrap().subject_id, "b");
        assert_eq!(ds.label_reads(), 0);
        assert!(ds.labels(0).is_some());
        assert_eq!(ds.label_reads(), 1);
    }

    #[test]
    fn dataset_rejects_duplicates_and_bad_labels() {
        let v = Volume::new("p01", ramp(2, 8, 8), None, None).unwrap();
        let err = Dataset::new(vec![v.clone(), v.clone()], 2).unwrap_err();
        assert!(err.to_string().contains("p01"));
        let mut labels = Array3::<u8>::zeros((2, 8, 8));
        labels[[0, 0, 0]] = 3;
        let lv = Volume::new("x", ramp(2, 8, 8), None, Some(labels)).unwrap();
        assert!(Dataset::new(vec![lv], 3).is_err());
    }
}
