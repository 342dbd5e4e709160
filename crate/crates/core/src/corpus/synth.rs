//! Deterministic synthetic boundary corpus.
//!
//! Each record is one geometric shape on a noisy background. One attribute
//! (position, colour or size) changes at the boundary and the three captions
//! are templated from the generating parameters, so the pixel to caption
//! mapping is learnable.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest_line, CaptionsEntry, ManifestEntry, MANIFEST_FILE};
use super::{CaptionTriplet, TSN_DIM};
use crate::error::{bail_config, Result};
use crate::serialization::{self, NamedTensorMap, TensorBlob};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn noun(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Segmentation class id; 0 is background.
    pub fn class_id(self) -> u8 {
        self as u8 + 1
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [220.0, 40.0, 40.0],
            Color::Green => [40.0, 200.0, 60.0],
            Color::Blue => [50.0, 80.0, 230.0],
            Color::Yellow => [230.0, 210.0, 40.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
    Center,
}

impl Position {
    pub const ALL: [Position; 5] = [Position::Left, Position::Right, Position::Top, Position::Bottom, Position::Center];

    pub fn word(self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Right => "right",
            Position::Top => "top",
            Position::Bottom => "bottom",
            Position::Center => "center",
        }
    }

    /// Centre as a fraction of the frame side.
    fn anchor(self) -> (f64, f64) {
        match self {
            Position::Left => (0.25, 0.5),
            Position::Right => (0.75, 0.5),
            Position::Top => (0.5, 0.25),
            Position::Bottom => (0.5, 0.75),
            Position::Center => (0.5, 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Half extent as a fraction of the frame side.
    fn radius(self) -> f64 {
        match self {
            Size::Small => 0.125,
            Size::Large => 0.22,
        }
    }
}

/// The attribute change happening at the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Move,
    Recolor,
    Grow,
    Shrink,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Move, Action::Recolor, Action::Grow, Action::Shrink];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub resolution: usize,
    pub min_side_frames: usize,
    pub max_side_frames: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<Color>,
    pub actions: Vec<Action>,
    /// Uniform pixel noise amplitude.
    pub noise: u8,
    /// Per-frame positional jitter in pixels.
    pub jitter: i32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            min_side_frames: 1,
            max_side_frames: 3,
            shapes: ShapeKind::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            actions: Action::ALL.to_vec(),
            noise: 16,
            jitter: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            bail_config!("corpus.shapes: no shapes configured");
        }
        if self.colors.len() < 2 {
            bail_config!("corpus.colors: at least two colours are required");
        }
        if self.actions.is_empty() {
            bail_config!("corpus.actions: no actions configured");
        }
        if self.resolution < 8 {
            bail_config!("corpus.resolution: {} is too small", self.resolution);
        }
        if self.min_side_frames == 0 || self.min_side_frames > self.max_side_frames || self.max_side_frames > super::MAX_SIDE_FRAMES {
            bail_config!(
                "corpus side frames: need 1 <= min ({}) <= max ({}) <= {}",
                self.min_side_frames,
                self.max_side_frames,
                super::MAX_SIDE_FRAMES
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ShapeState {
    center: (f64, f64),
    radius: f64,
    rgb: [f64; 3],
}

impl ShapeState {
    fn lerp(&self, other: &ShapeState, t: f64) -> ShapeState {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        ShapeState {
            center: (mix(self.center.0, other.center.0), mix(self.center.1, other.center.1)),
            radius: mix(self.radius, other.radius),
            rgb: [
                mix(self.rgb[0], other.rgb[0]),
                mix(self.rgb[1], other.rgb[1]),
                mix(self.rgb[2], other.rgb[2]),
            ],
        }
    }
}

/// Generating parameters of one record.
#[derive(Debug, Clone)]
struct Scene {
    shape: ShapeKind,
    action: Action,
    color: Color,
    color_after: Color,
    position: Position,
    position_after: Position,
    size: Size,
    size_after: Size,
}

impl Scene {
    fn sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Scene {
        let shape = *cfg.shapes.choose(rng).unwrap();
        let action = *cfg.actions.choose(rng).unwrap();
        let color = *cfg.colors.choose(rng).unwrap();
        let position = *Position::ALL.choose(rng).unwrap();
        let size = if rng.gen_bool(0.5) { Size::Small } else { Size::Large };
        let mut scene = Scene {
            shape,
            action,
            color,
            color_after: color,
            position,
            position_after: position,
            size,
            size_after: size,
        };
        match action {
            Action::Move => {
                let others: Vec<_> = Position::ALL.iter().copied().filter(|&p| p != position).collect();
                scene.position_after = *others.choose(rng).unwrap();
            }
            Action::Recolor => {
                let others: Vec<_> = cfg.colors.iter().copied().filter(|&c| c != color).collect();
                scene.color_after = *others.choose(rng).unwrap();
            }
            Action::Grow => {
                scene.size = Size::Small;
                scene.size_after = Size::Large;
            }
            Action::Shrink => {
                scene.size = Size::Large;
                scene.size_after = Size::Small;
            }
        }
        scene
    }

    fn captions(&self) -> CaptionTriplet {
        let shape = self.shape.noun();
        let color = self.color.word();
        let (before, after) = match self.action {
            Action::Move => (
                format!("the {color} {shape} is on the {}", self.position.word()),
                format!("the {color} {shape} moves to the {}", self.position_after.word()),
            ),
            Action::Recolor => (
                format!("the {shape} is {color}"),
                format!("the {shape} turns {}", self.color_after.word()),
            ),
            Action::Grow => (
                format!("the {color} {shape} is {}", self.size.word()),
                format!("the {color} {shape} grows {}", self.size_after.word()),
            ),
            Action::Shrink => (
                format!("the {color} {shape} is {}", self.size.word()),
                format!("the {color} {shape} shrinks {}", self.size_after.word()),
            ),
        };
        CaptionTriplet {
            subject: format!("a {color} {shape}"),
            status_before: before,
            status_after: after,
        }
    }

    fn state(&self, after: bool) -> ShapeState {
        let (pos, size, color) = if after {
            (self.position_after, self.size_after, self.color_after)
        } else {
            (self.position, self.size, self.color)
        };
        ShapeState {
            center: pos.anchor(),
            radius: size.radius(),
            rgb: color.rgb(),
        }
    }
}

/// Renders one frame and its mask.
fn render(shape: ShapeKind, state: &ShapeState, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let res = cfg.resolution;
    let side = res as f64;
    let jx = rng.gen_range(-cfg.jitter..=cfg.jitter) as f64;
    let jy = rng.gen_range(-cfg.jitter..=cfg.jitter) as f64;
    let cx = state.center.0 * side + jx;
    let cy = state.center.1 * side + jy;
    let r = state.radius * side;
    let mut pixels = vec![0u8; 3 * res * res];
    let mut mask = vec![0u8; res * res];
    let noise = cfg.noise as i32;
    for y in 0..res {
        for x in 0..res {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = shape.contains(dx, dy, r);
            if inside {
                mask[y * res + x] = shape.class_id();
            }
            for c in 0..3 {
                let base = if inside { state.rgb[c] } else { 30.0 };
                let jitter = if noise > 0 { rng.gen_range(-noise..=noise) } else { 0 };
                let v = (base.round() as i32 + jitter).clamp(0, 255);
                pixels[c * res * res + y * res + x] = v as u8;
            }
        }
    }
    (pixels, mask)
}

/// TSN stand-in: a fixed pseudo-random vector per (action, side).
pub(crate) fn tsn_vector(action: Action, after: bool) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x75e0_0000 + (action as u64) * 2 + after as u64);
    (0..TSN_DIM)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect()
}

fn save_single(path: &Path, name: &str, blob: TensorBlob) -> Result<()> {
    let mut map = NamedTensorMap::new();
    map.insert(name, blob)?;
    serialization::save(&map, path)?;
    Ok(())
}

/// Writes `n_records` synthetic records to `out`: `manifest.jsonl` plus
/// `frames/`, `masks/` and `tsn/` tensor files. Pure function of `(seed, cfg)`.
pub fn synth_corpus(seed: u64, n_records: usize, cfg: &SynthConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    if n_records == 0 {
        bail_config!("n_records must be at least 1");
    }
    cfg.validate()?;
    for sub in ["frames", "masks", "tsn"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let res = cfg.resolution;
    let mut manifest = Vec::with_capacity(n_records);
    let mut lines = String::new();
    for index in 0..n_records {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        let scene = Scene::sample(&mut rng, cfg);
        let nb = rng.gen_range(cfg.min_side_frames..=cfg.max_side_frames);
        let na = rng.gen_range(cfg.min_side_frames..=cfg.max_side_frames);
        let video_id = format!("synth{seed}_v{index:04}");
        let boundary_id = "b0".to_string();
        let stem = format!("{video_id}_{boundary_id}");

        let before = scene.state(false);
        let after = scene.state(true);
        let states = (0..nb)
            .map(|_| before)
            .chain(std::iter::once(before.lerp(&after, 0.5)))
            .chain((0..na).map(|_| after));
        let mut frame_paths = Vec::new();
        let mut mask_paths = Vec::new();
        for (k, state) in states.enumerate() {
            let (pixels, mask) = render(scene.shape, &state, cfg, &mut rng);
            let frame_rel = format!("frames/{stem}_f{k:02}.rvtc");
            let mask_rel = format!("masks/{stem}_f{k:02}.rvtc");
            save_single(&out.join(&frame_rel), "pixels", TensorBlob::from_u8(vec![3, res, res], pixels)?)?;
            save_single(&out.join(&mask_rel), "class_ids", TensorBlob::from_u8(vec![res, res], mask)?)?;
            frame_paths.push(frame_rel);
            mask_paths.push(mask_rel);
        }
        let tsn_before = format!("tsn/{stem}_before.rvtc");
        let tsn_after = format!("tsn/{stem}_after.rvtc");
        save_single(&out.join(&tsn_before), "tsn", TensorBlob::from_f32(vec![TSN_DIM], &tsn_vector(scene.action, false))?)?;
        save_single(&out.join(&tsn_after), "tsn", TensorBlob::from_f32(vec![TSN_DIM], &tsn_vector(scene.action, true))?)?;

        let captions = scene.captions();
        let entry = ManifestEntry {
            video_id,
            boundary_id,
            frames_before: frame_paths[..nb].to_vec(),
            boundary_frame: frame_paths[nb].clone(),
            frames_after: frame_paths[nb + 1..].to_vec(),
            seg_masks: mask_paths,
            tsn_before,
            tsn_after,
            captions: CaptionsEntry::from(&captions),
        };
        write_manifest_line(&mut lines, &entry)?;
        manifest.push(entry);
    }
    fs::write(out.join(MANIFEST_FILE), lines)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_render_inside_frame() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for shape in ShapeKind::ALL {
            let state = ShapeState {
                center: Position::Left.anchor(),
                radius: Size::Large.radius(),
                rgb: Color::Red.rgb(),
            };
            let (_, mask) = render(shape, &state, &cfg, &mut rng);
            let area = mask.iter().filter(|&&m| m == shape.class_id()).count();
            assert!(area > 20, "{shape:?} area {area}");
            assert!(mask.iter().all(|&m| m == 0 || m == shape.class_id()));
        }
    }

    #[test]
    fn captions_follow_templates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SynthConfig::default();
        for _ in 0..50 {
            let scene = Scene::sample(&mut rng, &cfg);
            let c = scene.captions();
            assert!(c.subject.starts_with("a "));
            assert!(c.subject.ends_with(scene.shape.noun()));
            match scene.action {
                Action::Move => assert_ne!(scene.position, scene.position_after),
                Action::Recolor => assert_ne!(scene.color, scene.color_after),
                Action::Grow => assert!(c.status_after.ends_with("grows large")),
                Action::Shrink => assert!(c.status_after.ends_with("shrinks small")),
            }
        }
    }

    #[test]
    fn tsn_depends_only_on_action_and_side() {
        assert_eq!(tsn_vector(Action::Move, false), tsn_vector(Action::Move, false));
        assert_ne!(tsn_vector(Action::Move, false), tsn_vector(Action::Move, true));
        assert_ne!(tsn_vector(Action::Move, false), tsn_vector(Action::Grow, false));
        assert_eq!(tsn_vector(Action::Recolor, true).len(), TSN_DIM);
    }

    #[test]
    fn config_errors() {
        let mut cfg = SynthConfig::default();
        cfg.shapes.clear();
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig {
            max_side_frames: 11,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
