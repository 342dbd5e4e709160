//! Boundary records: data types, the synthetic generator, manifest I/O and
//! frame sampling.

mod manifest;
mod synth;

pub use manifest::{load_manifest, read_manifest_entries, write_manifest_line, CaptionsEntry, ManifestEntry, MANIFEST_FILE};
pub use synth::{synth_corpus, Action, Color, ShapeKind, Size, SynthConfig, Position};

use serde::{Deserialize, Serialize};

/// Hard cap on frames per side of a boundary.
pub const MAX_SIDE_FRAMES: usize = 10;
/// Length of each precomputed TSN feature vector.
pub const TSN_DIM: usize = 2048;
/// Longest caption accepted, in words: 128 minus the control and end tokens.
pub const MAX_CAPTION_WORDS: usize = 126;

/// One RGB frame, `u8` `[3, H, W]` with `H == W == resolution`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub resolution: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(resolution: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), 3 * resolution * resolution);
        Self { resolution, pixels }
    }

    pub fn filled(resolution: usize, value: u8) -> Self {
        Self::new(resolution, vec![value; 3 * resolution * resolution])
    }
}

/// Per-pixel segmentation class ids, `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub resolution: usize,
    pub class_ids: Vec<u8>,
}

impl SegMask {
    pub fn new(resolution: usize, class_ids: Vec<u8>) -> Self {
        debug_assert_eq!(class_ids.len(), resolution * resolution);
        Self {
            resolution,
            class_ids,
        }
    }

    pub fn background(resolution: usize) -> Self {
        Self::new(resolution, vec![0; resolution * resolution])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTriplet {
    pub subject: String,
    pub status_before: String,
    pub status_after: String,
}

/// Which of the three caption fields a sequence describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionType {
    Subject,
    StatusBefore,
    StatusAfter,
}

impl CaptionType {
    pub const ALL: [CaptionType; 3] = [
        CaptionType::Subject,
        CaptionType::StatusBefore,
        CaptionType::StatusAfter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaptionType::Subject => "subject",
            CaptionType::StatusBefore => "status_before",
            CaptionType::StatusAfter => "status_after",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl CaptionTriplet {
    pub fn get(&self, kind: CaptionType) -> &str {
        match kind {
            CaptionType::Subject => &self.subject,
            CaptionType::StatusBefore => &self.status_before,
            CaptionType::StatusAfter => &self.status_after,
        }
    }
}

/// A validated, fully loaded event boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRecord {
    pub video_id: String,
    pub boundary_id: String,
    pub frames_before: Vec<Frame>,
    pub boundary_frame: Frame,
    pub frames_after: Vec<Frame>,
    /// One mask per frame, in before / boundary / after order.
    pub seg_masks: Vec<SegMask>,
    pub tsn_before: Vec<f32>,
    pub tsn_after: Vec<f32>,
    pub captions: CaptionTriplet,
}

impl BoundaryRecord {
    pub fn frame_count(&self) -> usize {
        self.frames_before.len() + 1 + self.frames_after.len()
    }

    pub fn key(&self) -> (String, String) {
        (self.video_id.clone(), self.boundary_id.clone())
    }

    /// Checks every record invariant, naming the offending field.
    pub fn validate(&self) -> Result<(), String> {
        let nb = self.frames_before.len();
        let na = self.frames_after.len();
        if !(1..=MAX_SIDE_FRAMES).contains(&nb) {
            return Err(format!("frames_before: {nb} frames, expected 1..={MAX_SIDE_FRAMES}"));
        }
        if !(1..=MAX_SIDE_FRAMES).contains(&na) {
            return Err(format!("frames_after: {na} frames, expected 1..={MAX_SIDE_FRAMES}"));
        }
        if self.seg_masks.len() != self.frame_count() {
            return Err(format!(
                "seg_masks: {} masks for {} frames",
                self.seg_masks.len(),
                self.frame_count()
            ));
        }
        if self.tsn_before.len() != TSN_DIM {
            return Err(format!("tsn_before: length {}, expected {TSN_DIM}", self.tsn_before.len()));
        }
        if self.tsn_after.len() != TSN_DIM {
            return Err(format!("tsn_after: length {}, expected {TSN_DIM}", self.tsn_after.len()));
        }
        let res = self.boundary_frame.resolution;
        let frames = self
            .frames_before
            .iter()
            .chain(std::iter::once(&self.boundary_frame))
            .chain(&self.frames_after);
        for (i, (frame, mask)) in frames.zip(&self.seg_masks).enumerate() {
            if frame.resolution != res || frame.pixels.len() != 3 * res * res {
                return Err(format!("frame #{i}: expected [3, {res}, {res}]"));
            }
            if mask.resolution != res || mask.class_ids.len() != res * res {
                return Err(format!("seg_masks #{i}: expected [{res}, {res}]"));
            }
        }
        for kind in CaptionType::ALL {
            let text = self.captions.get(kind);
            let words = text.split_whitespace().count();
            if words == 0 {
                return Err(format!("captions.{}: empty", kind.as_str()));
            }
            if words > MAX_CAPTION_WORDS {
                return Err(format!(
                    "captions.{}: {words} tokens exceeds {MAX_CAPTION_WORDS}",
                    kind.as_str()
                ));
            }
        }
        Ok(())
    }
}

/// Position of a frame relative to the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Before,
    Boundary,
    After,
}

/// Frames chosen for the model, in temporal order.
#[derive(Debug, Clone)]
pub struct SampledFrames<'a> {
    pub frames: Vec<&'a Frame>,
    pub masks: Vec<&'a SegMask>,
    pub sides: Vec<Side>,
}

impl SampledFrames<'_> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn count(&self, side: Side) -> usize {
        self.sides.iter().filter(|&&s| s == side).count()
    }
}

/// Indices kept when subsampling `available` frames down to `max`:
/// `floor(i * available / max)` for `i in 0..max`.
pub fn stride_indices(available: usize, max: usize) -> Vec<usize> {
    if available <= max {
        (0..available).collect()
    } else {
        (0..max).map(|i| i * available / max).collect()
    }
}

/// Up to `max_per_side` frames each side of the boundary plus the boundary
/// frame, with aligned masks and side labels.
pub fn sample_frames(record: &BoundaryRecord, max_per_side: usize) -> SampledFrames<'_> {
    let nb = record.frames_before.len();
    let mut out = SampledFrames {
        frames: Vec::new(),
        masks: Vec::new(),
        sides: Vec::new(),
    };
    for i in stride_indices(nb, max_per_side) {
        out.frames.push(&record.frames_before[i]);
        out.masks.push(&record.seg_masks[i]);
        out.sides.push(Side::Before);
    }
    out.frames.push(&record.boundary_frame);
    out.masks.push(&record.seg_masks[nb]);
    out.sides.push(Side::Boundary);
    for i in stride_indices(record.frames_after.len(), max_per_side) {
        out.frames.push(&record.frames_after[i]);
        out.masks.push(&record.seg_masks[nb + 1 + i]);
        out.sides.push(Side::After);
    }
    out
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// A small valid record whose frames are filled with distinct values.
    pub fn record(nb: usize, na: usize, res: usize) -> BoundaryRecord {
        let n = nb + 1 + na;
        let frames: Vec<Frame> = (0..n).map(|i| Frame::filled(res, (i * 10) as u8)).collect();
        BoundaryRecord {
            video_id: "v".into(),
            boundary_id: "b".into(),
            frames_before: frames[..nb].to_vec(),
            boundary_frame: frames[nb].clone(),
            frames_after: frames[nb + 1..].to_vec(),
            seg_masks: (0..n).map(|_| SegMask::background(res)).collect(),
            tsn_before: vec![0.0; TSN_DIM],
            tsn_after: vec![0.0; TSN_DIM],
            captions: CaptionTriplet {
                subject: "a red circle".into(),
                status_before: "the red circle is small".into(),
                status_after: "the red circle grows large".into(),
            },
        }
    }
}
