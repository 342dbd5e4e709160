//! JSONL manifest: one boundary per line, tensor fields as relative `.rvtc`
//! paths under the corpus directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundaryRecord, CaptionTriplet, Frame, SegMask, TSN_DIM};
use crate::error::{Error, Result};
use crate::serialization;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionsEntry {
    pub subject: String,
    pub status_before: String,
    pub status_after: String,
}

impl From<&CaptionTriplet> for CaptionsEntry {
    fn from(c: &CaptionTriplet) -> Self {
        Self {
            subject: c.subject.clone(),
            status_before: c.status_before.clone(),
            status_after: c.status_after.clone(),
        }
    }
}

/// On-disk form of a [`BoundaryRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub boundary_id: String,
    pub frames_before: Vec<String>,
    pub boundary_frame: String,
    pub frames_after: Vec<String>,
    pub seg_masks: Vec<String>,
    pub tsn_before: String,
    pub tsn_after: String,
    pub captions: CaptionsEntry,
}

pub fn write_manifest_line(out: &mut String, entry: &ManifestEntry) -> Result<()> {
    let line = serde_json::to_string(entry)?;
    writeln!(out, "{line}").expect("writing to a String");
    Ok(())
}

fn data_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("manifest line {line}: {msg}"))
}

fn single_tensor(root: &Path, rel: &str, name: &str, line: usize, field: &str) -> Result<serialization::TensorBlob> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(data_err(line, format!("{field}: missing referenced file {rel}")));
    }
    let map = serialization::load(&path).map_err(|e| data_err(line, format!("{field}: {rel}: {e}")))?;
    map.require(name)
        .cloned()
        .map_err(|e| data_err(line, format!("{field}: {rel}: {e}")))
}

fn load_frame(root: &Path, rel: &str, line: usize, field: &str) -> Result<Frame> {
    let blob = single_tensor(root, rel, "pixels", line, field)?;
    let dims = blob.dims();
    if dims.len() != 3 || dims[0] != 3 || dims[1] != dims[2] {
        return Err(data_err(line, format!("{field}: {rel}: expected [3, H, H], got {dims:?}")));
    }
    let pixels = blob
        .to_u8()
        .map_err(|e| data_err(line, format!("{field}: {rel}: {e}")))?
        .to_vec();
    Ok(Frame::new(dims[1], pixels))
}

fn load_mask(root: &Path, rel: &str, line: usize) -> Result<SegMask> {
    let blob = single_tensor(root, rel, "class_ids", line, "seg_masks")?;
    let dims = blob.dims();
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(data_err(line, format!("seg_masks: {rel}: expected [H, H], got {dims:?}")));
    }
    let ids = blob
        .to_u8()
        .map_err(|e| data_err(line, format!("seg_masks: {rel}: {e}")))?
        .to_vec();
    Ok(SegMask::new(dims[0], ids))
}

fn load_tsn(root: &Path, rel: &str, line: usize, field: &str) -> Result<Vec<f32>> {
    let blob = single_tensor(root, rel, "tsn", line, field)?;
    if blob.dims() != [TSN_DIM] {
        return Err(data_err(line, format!("{field}: length {:?}, expected [{TSN_DIM}]", blob.dims())));
    }
    blob.to_f32().map_err(|e| data_err(line, format!("{field}: {e}")))
}

impl ManifestEntry {
    /// Loads all referenced tensors relative to `root` and validates.
    pub fn load(&self, root: &Path, line: usize) -> Result<BoundaryRecord> {
        // Cheap count checks first, so bound violations report before I/O.
        let nb = self.frames_before.len();
        let na = self.frames_after.len();
        let shell = |msg: String| data_err(line, msg);
        if !(1..=super::MAX_SIDE_FRAMES).contains(&nb) {
            return Err(shell(format!("frames_before: {nb} frames, expected 1..={}", super::MAX_SIDE_FRAMES)));
        }
        if !(1..=super::MAX_SIDE_FRAMES).contains(&na) {
            return Err(shell(format!("frames_after: {na} frames, expected 1..={}", super::MAX_SIDE_FRAMES)));
        }
        if self.seg_masks.len() != nb + 1 + na {
            return Err(shell(format!("seg_masks: {} masks for {} frames", self.seg_masks.len(), nb + 1 + na)));
        }
        let frames_before = self
            .frames_before
            .iter()
            .map(|p| load_frame(root, p, line, "frames_before"))
            .collect::<Result<Vec<_>>>()?;
        let boundary_frame = load_frame(root, &self.boundary_frame, line, "boundary_frame")?;
        let frames_after = self
            .frames_after
            .iter()
            .map(|p| load_frame(root, p, line, "frames_after"))
            .collect::<Result<Vec<_>>>()?;
        let seg_masks = self
            .seg_masks
            .iter()
            .map(|p| load_mask(root, p, line))
            .collect::<Result<Vec<_>>>()?;
        let record = BoundaryRecord {
            video_id: self.video_id.clone(),
            boundary_id: self.boundary_id.clone(),
            frames_before,
            boundary_frame,
            frames_after,
            seg_masks,
            tsn_before: load_tsn(root, &self.tsn_before, line, "tsn_before")?,
            tsn_after: load_tsn(root, &self.tsn_after, line, "tsn_after")?,
            captions: CaptionTriplet {
                subject: self.captions.subject.clone(),
                status_before: self.captions.status_before.clone(),
                status_after: self.captions.status_after.clone(),
            },
        };
        record.validate().map_err(|msg| data_err(line, msg))?;
        Ok(record)
    }
}

/// Parses the manifest without touching referenced files.
pub fn read_manifest_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| data_err(i + 1, format!("malformed JSON: {e}")))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads and validates every record of a JSONL manifest, in file order.
/// `path` may name the manifest itself or the corpus directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<BoundaryRecord>> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = file.parent().unwrap_or_else(|| Path::new("."));
    let text = fs::read_to_string(&file)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", file.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| data_err(i + 1, format!("malformed JSON: {e}")))?;
        records.push(entry.load(root, i + 1)?);
    }
    Ok(records)
}
