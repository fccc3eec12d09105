use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major image features. Row order is the canonical image order
/// used by every other module; nothing downstream reorders rows.
///
/// Values are held as `f64` in memory. On disk they are little-endian `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    num_images: usize,
    num_dims: usize,
    data: Vec<f64>,
    image_ids: Vec<String>,
}

impl FeatureMatrix {
    /// Builds a matrix with default ids `"0"`, `"1"`, ...
    pub fn new(num_images: usize, num_dims: usize, data: Vec<f64>) -> Result<Self> {
        let ids = (0..num_images).map(|i| i.to_string()).collect();
        Self::with_ids(num_images, num_dims, data, ids)
    }

    pub fn with_ids(
        num_images: usize,
        num_dims: usize,
        data: Vec<f64>,
        image_ids: Vec<String>,
    ) -> Result<Self> {
        if num_images == 0 || num_dims == 0 {
            return Err(Error::Shape(format!(
                "matrix must be at least 1x1, got {num_images}x{num_dims}"
            )));
        }
        if data.len() != num_images * num_dims {
            return Err(Error::Shape(format!(
                "declared {num_images}x{num_dims} = {} values, payload has {}",
                num_images * num_dims,
                data.len()
            )));
        }
        if image_ids.len() != num_images {
            return Err(Error::Shape(format!(
                "{} image ids for {num_images} rows",
                image_ids.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / num_dims,
                col: pos % num_dims,
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(image_ids.len());
        for id in &image_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Shape(format!("duplicate image id {id:?}")));
            }
        }
        Ok(Self {
            num_images,
            num_dims,
            data,
            image_ids,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_dims = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != num_dims) {
            return Err(Error::Shape(format!(
                "row {bad} has {} values, expected {num_dims}",
                rows[bad].len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), num_dims, data)
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn num_dims(&self) -> usize {
        self.num_dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_dims..(i + 1) * self.num_dims]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.num_dims)
    }

    /// New matrix holding the given rows, in the given order, with their ids.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.num_dims);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.num_images {
                return Err(Error::Shape(format!(
                    "row {i} out of range for {} images",
                    self.num_images
                )));
            }
            data.extend_from_slice(self.row(i));
            ids.push(self.image_ids[i].clone());
        }
        Self::with_ids(indices.len(), self.num_dims, data, ids)
    }
}

/// JSON manifest that accompanies a raw `f32le` payload. Shared by feature
/// files and serialized similarity matrices (which add `tags` and `kind`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub num_images: usize,
    pub num_dims: usize,
    pub dtype: String,
    pub order: String,
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

pub(crate) const DTYPE: &str = "f32le";
pub(crate) const ORDER: &str = "row-major";

fn payload_path(manifest_path: &Path, data: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(data),
        None => PathBuf::from(data),
    }
}

/// Reads a manifest and its payload; values are widened to `f64` exactly.
pub(crate) fn read_raw_matrix(path: &Path) -> Result<(MatrixManifest, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: MatrixManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.dtype != DTYPE {
        return Err(Error::Shape(format!(
            "unsupported dtype {:?}, expected {DTYPE:?}",
            manifest.dtype
        )));
    }
    if manifest.order != ORDER {
        return Err(Error::Shape(format!(
            "unsupported order {:?}, expected {ORDER:?}",
            manifest.order
        )));
    }
    let bin = payload_path(path, &manifest.data);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = manifest.num_images * manifest.num_dims * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "declared {}x{} needs {expected} bytes, {} holds {}",
            manifest.num_images,
            manifest.num_dims,
            bin.display(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((manifest, values))
}

/// Writes `<stem>.json` + `<stem>.bin` next to each other. Values are
/// narrowed to `f32`.
pub(crate) fn write_raw_matrix(
    path: &Path,
    rows: usize,
    cols: usize,
    values: &[f64],
    image_ids: Option<Vec<String>>,
    tags: Option<Vec<String>>,
    kind: Option<String>,
) -> Result<()> {
    debug_assert_eq!(values.len(), rows * cols);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidParameter(format!("bad manifest path {}", path.display())))?;
    let data_name = format!("{stem}.bin");
    let manifest = MatrixManifest {
        num_images: rows,
        num_dims: cols,
        dtype: DTYPE.to_string(),
        order: ORDER.to_string(),
        data: data_name.clone(),
        image_ids,
        tags,
        kind,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let bin = payload_path(path, &data_name);
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    json.push(b'\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a feature file from its JSON manifest. A manifest without
/// `image_ids` gets ids `"0"`, `"1"`, ...
pub fn load_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let (manifest, values) = read_raw_matrix(path)?;
    let ids = manifest
        .image_ids
        .unwrap_or_else(|| (0..manifest.num_images).map(|i| i.to_string()).collect());
    FeatureMatrix::with_ids(manifest.num_images, manifest.num_dims, values, ids)
}

pub fn write_feature_matrix(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_raw_matrix(
        path.as_ref(),
        matrix.num_images,
        matrix.num_dims,
        &matrix.data,
        Some(matrix.image_ids.clone()),
        None,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, n: usize, d: usize, payload: &[f32]) -> PathBuf {
        let manifest = serde_json::json!({
            "num_images": n, "num_dims": d, "dtype": "f32le",
            "order": "row-major", "data": "m.bin",
            "image_ids": (0..n).map(|i| format!("img{i}")).collect::<Vec<_>>(),
        });
        let path = dir.join("m.json");
        fs::write(&path, manifest.to_string()).unwrap();
        let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join("m.bin"), bytes).unwrap();
        path
    }

    #[test]
    fn decodes_two_by_three() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), 2, 3, &[1., 2., 3., 4., 5., 6.]);
        let m = load_feature_matrix(&path).unwrap();
        assert_eq!(m.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(m.image_ids(), &["img0", "img1"]);
    }

    #[test]
    fn short_payload_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), 2, 3, &[1., 2., 3., 4., 5.]);
        assert!(matches!(load_feature_matrix(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), 1, 2, &[1.0, f32::NAN]);
        assert!(matches!(
            load_feature_matrix(&path),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_feature_matrix(dir.path().join("nope.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn select_rows_keeps_ids() {
        let m = FeatureMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = m.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0]);
        assert_eq!(s.image_ids(), &["2", "0"]);
    }
}
