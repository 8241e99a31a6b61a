//! Synthetic constant-velocity scenes. Rectangles and disks glide over a
//! smooth colour gradient; motion is exactly linear and objects are spawned
//! so they never leave the frame, which makes the ground-truth backward flow
//! known at every pixel.

use crate::error::{Error, Result};
use crate::frames::{list_pngs_sorted, load_frame_png, save_frame_png};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Supersampling grid per pixel axis when rasterising object coverage.
const AA: usize = 4;
/// Keep-out margin from the canvas border, pixels.
const MARGIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    #[serde(default = "default_canvas")]
    pub width: usize,
    #[serde(default = "default_canvas")]
    pub height: usize,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    /// Object speed range in pixels per frame; capped at 4.
    #[serde(default = "default_min_speed")]
    pub min_speed: f64,
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
    /// Frames per sequence, at least 7.
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_canvas() -> usize {
    64
}
fn default_min_objects() -> usize {
    2
}
fn default_max_objects() -> usize {
    5
}
fn default_min_speed() -> f64 {
    1.0
}
fn default_max_speed() -> f64 {
    3.5
}
fn default_frames() -> usize {
    8
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: default_canvas(),
            height: default_canvas(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
            min_speed: default_min_speed(),
            max_speed: default_max_speed(),
            frames: default_frames(),
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config("canvas must be at least 8x8".into()));
        }
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return Err(Error::Config("object count range is empty".into()));
        }
        if !(0.0..=4.0).contains(&self.min_speed) || !(self.min_speed..=4.0).contains(&self.max_speed) {
            return Err(Error::Config("speed range must satisfy 0 <= min <= max <= 4".into()));
        }
        if self.frames < 7 {
            return Err(Error::Config(format!("sequences need at least 7 frames, got {}", self.frames)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Rectangle,
    Disk,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Centre at frame 0, (x, y) pixels.
    pub center: (f64, f64),
    /// Constant velocity, pixels per frame.
    pub velocity: (f64, f64),
    /// Rectangle half extents, or (radius, radius) for disks.
    pub half_size: (f64, f64),
    pub color: [f64; 3],
}

impl SceneObject {
    fn center_at(&self, t: usize) -> (f64, f64) {
        (self.center.0 + self.velocity.0 * t as f64, self.center.1 + self.velocity.1 * t as f64)
    }

    fn contains(&self, cx: f64, cy: f64, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self.kind {
            ObjectKind::Rectangle => dx.abs() <= self.half_size.0 && dy.abs() <= self.half_size.1,
            ObjectKind::Disk => dx * dx + dy * dy <= self.half_size.0 * self.half_size.0,
        }
    }

    /// Supersampled coverage of one pixel at frame `t`.
    fn coverage(&self, t: usize, x: usize, y: usize) -> f64 {
        let (cx, cy) = self.center_at(t);
        // cheap reject: pixel centre far outside the bounding box
        let reach = self.half_size.0.max(self.half_size.1) + 1.0;
        if (x as f64 - cx).abs() > reach || (y as f64 - cy).abs() > reach {
            return 0.0;
        }
        let mut hits = 0;
        for j in 0..AA {
            for i in 0..AA {
                let px = x as f64 - 0.5 + (i as f64 + 0.5) / AA as f64;
                let py = y as f64 - 0.5 + (j as f64 + 0.5) / AA as f64;
                if self.contains(cx, cy, px, py) {
                    hits += 1;
                }
            }
        }
        f64::from(hits) / (AA * AA) as f64
    }
}

/// One generated sequence: frames, per-pair ground-truth backward flows
/// (`flows[t]` maps frame `t+1` back to frame `t`), and the scene that
/// produced them.
#[derive(Clone)]
pub struct Sequence {
    pub frames: Vec<Tensor<f32>>,
    pub flows: Vec<Tensor<f32>>,
    pub objects: Vec<SceneObject>,
}

/// Smooth background: bilinear blend of four random corner colours.
fn background(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let corners: [[f64; 3]; 4] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.25..0.75)));
    Tensor::from_fn_chw(3, spec.height, spec.width, |c, y, x| {
        let fx = x as f64 / (spec.width - 1) as f64;
        let fy = y as f64 / (spec.height - 1) as f64;
        let v = corners[0][c] * (1.0 - fx) * (1.0 - fy)
            + corners[1][c] * fx * (1.0 - fy)
            + corners[2][c] * (1.0 - fx) * fy
            + corners[3][c] * fx * fy;
        v as f32
    })
}

fn spawn_objects(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let travel_t = (spec.frames - 1) as f64;
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = if rng.random_bool(0.5) { ObjectKind::Rectangle } else { ObjectKind::Disk };
        let speed = rng.random_range(spec.min_speed..=spec.max_speed);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let velocity = (speed * angle.cos(), speed * angle.sin());
        let half = match kind {
            ObjectKind::Rectangle => (rng.random_range(4.0..9.0), rng.random_range(4.0..9.0)),
            ObjectKind::Disk => {
                let r = rng.random_range(4.0..9.0);
                (r, r)
            }
        };
        // feasible start interval so the whole trajectory stays inside
        let axis_range = |extent: f64, h: f64, v: f64| -> Result<(f64, f64)> {
            let lo = h + MARGIN + (-v * travel_t).max(0.0);
            let hi = extent - h - MARGIN - (v * travel_t).max(0.0);
            if lo >= hi {
                return Err(Error::SceneGen(format!(
                    "object of half-size {h:.1} travelling {:.1} px cannot fit a {extent} px axis",
                    (v * travel_t).abs()
                )));
            }
            Ok((lo, hi))
        };
        let (xlo, xhi) = axis_range(spec.width as f64, half.0, velocity.0)?;
        let (ylo, yhi) = axis_range(spec.height as f64, half.1, velocity.1)?;
        let center = (rng.random_range(xlo..xhi), rng.random_range(ylo..yhi));
        // saturated colours read well against the mid-tone background
        let color: [f64; 3] = std::array::from_fn(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0.0..0.2)
            } else {
                rng.random_range(0.8..1.0)
            }
        });
        objects.push(SceneObject { kind, center, velocity, half_size: half, color });
    }
    Ok(objects)
}

fn render_frame(spec: &SyntheticSceneSpec, bg: &Tensor<f32>, objects: &[SceneObject], t: usize) -> Tensor<f32> {
    let mut frame = bg.clone();
    for obj in objects {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let cov = obj.coverage(t, x, y);
                if cov > 0.0 {
                    for c in 0..3 {
                        let old = frame.at3(c, y, x);
                        frame.set3(c, y, x, old * (1.0 - cov as f32) + obj.color[c] as f32 * cov as f32);
                    }
                }
            }
        }
    }
    frame
}

/// Ground-truth backward flow from frame `t+1` to frame `t`, on the `t+1`
/// grid. Pixels majority-covered by an object carry minus its velocity; the
/// background is static. The topmost (last-drawn) object wins.
fn ground_truth_flow(spec: &SyntheticSceneSpec, objects: &[SceneObject], t_next: usize) -> Tensor<f32> {
    let mut flow = Tensor::zeros(&[2, spec.height, spec.width]);
    for y in 0..spec.height {
        for x in 0..spec.width {
            for obj in objects.iter().rev() {
                if obj.coverage(t_next, x, y) > 0.5 {
                    flow.set3(0, y, x, -obj.velocity.0 as f32);
                    flow.set3(1, y, x, -obj.velocity.1 as f32);
                    break;
                }
            }
        }
    }
    flow
}

fn gen_sequence(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Result<Sequence> {
    let bg = background(spec, rng);
    let objects = spawn_objects(spec, rng)?;
    let frames: Vec<Tensor<f32>> = (0..spec.frames).map(|t| render_frame(spec, &bg, &objects, t)).collect();
    let flows: Vec<Tensor<f32>> =
        (1..spec.frames).map(|t| ground_truth_flow(spec, &objects, t)).collect();
    Ok(Sequence { frames, flows, objects })
}

/// Generates `count` sequences, deterministically from the spec seed.
pub fn gen_synthetic_dataset(spec: &SyntheticSceneSpec, count: usize) -> Result<Vec<Sequence>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..count)
        .map(|_| {
            let sub = master.random::<u64>();
            gen_sequence(spec, &mut ChaCha8Rng::seed_from_u64(sub))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: SyntheticSceneSpec,
    objects: Vec<SceneObject>,
}

/// Writes sequences as `seq_NNNN/frame_NNNN.png` plus a JSON sidecar holding
/// the scene spec and per-object ground-truth velocities.
pub fn save_dataset(dir: &Path, spec: &SyntheticSceneSpec, sequences: &[Sequence]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, seq) in sequences.iter().enumerate() {
        let seq_dir = dir.join(format!("seq_{i:04}"));
        std::fs::create_dir_all(&seq_dir)?;
        for (t, frame) in seq.frames.iter().enumerate() {
            save_frame_png(&seq_dir.join(format!("frame_{:04}.png", t + 1)), frame)?;
        }
        let sidecar = Sidecar { spec: spec.clone(), objects: seq.objects.clone() };
        std::fs::write(seq_dir.join("scene.json"), serde_json::to_vec_pretty(&sidecar)?)?;
    }
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`]. Ground-truth flows
/// are not materialised on disk; loaded sequences carry empty flow lists.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    let mut seq_dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seq_dirs.sort();
    if seq_dirs.is_empty() {
        return Err(Error::Config(format!("no sequence directories under {}", dir.display())));
    }
    let mut out = Vec::with_capacity(seq_dirs.len());
    for sd in seq_dirs {
        let frames = list_pngs_sorted(&sd)?
            .iter()
            .map(|p| load_frame_png(p))
            .collect::<Result<Vec<_>>>()?;
        if frames.len() < 3 {
            return Err(Error::Config(format!("{} holds fewer than 3 frames", sd.display())));
        }
        let objects = match std::fs::read(sd.join("scene.json")) {
            Ok(bytes) => serde_json::from_slice::<Sidecar>(&bytes)?.objects,
            Err(_) => Vec::new(),
        };
        out.push(Sequence { frames, flows: Vec::new(), objects });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn same_seed_bit_identical() {
        let spec = SyntheticSceneSpec { seed: 9, ..Default::default() };
        let a = gen_synthetic_dataset(&spec, 2).unwrap();
        let b = gen_synthetic_dataset(&spec, 2).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            for (fa, fb) in sa.frames.iter().zip(&sb.frames) {
                assert_eq!(fa.data(), fb.data());
            }
        }
    }

    #[test]
    fn zero_velocity_freezes_the_scene() {
        let spec = SyntheticSceneSpec { min_speed: 0.0, max_speed: 0.0, seed: 4, ..Default::default() };
        let ds = gen_synthetic_dataset(&spec, 1).unwrap();
        let first = &ds[0].frames[0];
        for f in &ds[0].frames[1..] {
            assert_eq!(f.data(), first.data());
        }
        // and the ground-truth flow is all zero
        assert!(ds[0].flows.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn ground_truth_flow_is_minus_velocity_over_object() {
        // hand-build: one rectangle moving (+2, 0)
        let spec = SyntheticSceneSpec { seed: 0, ..Default::default() };
        let obj = SceneObject {
            kind: ObjectKind::Rectangle,
            center: (20.0, 32.0),
            velocity: (2.0, 0.0),
            half_size: (6.0, 5.0),
            color: [1.0, 0.0, 0.0],
        };
        let flow = ground_truth_flow(&spec, std::slice::from_ref(&obj), 1);
        // at t=1 the centre sits at (22, 32)
        assert_eq!(flow.at3(0, 32, 22), -2.0);
        assert_eq!(flow.at3(1, 32, 22), 0.0);
        // far corner is background
        assert_eq!(flow.at3(0, 2, 2), 0.0);
    }

    #[test]
    fn infeasible_travel_is_an_error() {
        let spec = SyntheticSceneSpec {
            width: 16,
            height: 16,
            min_speed: 4.0,
            max_speed: 4.0,
            frames: 8,
            min_objects: 1,
            max_objects: 1,
            seed: 1,
            ..Default::default()
        };
        assert!(matches!(gen_synthetic_dataset(&spec, 1), Err(Error::SceneGen(_))));
    }

    #[test]
    fn short_sequences_rejected() {
        let spec = SyntheticSceneSpec { frames: 5, ..Default::default() };
        assert!(gen_synthetic_dataset(&spec, 1).is_err());
    }

    #[test]
    fn dataset_disk_roundtrip() {
        let dir = tempdir().unwrap();
        let spec = SyntheticSceneSpec { seed: 12, ..Default::default() };
        let ds = gen_synthetic_dataset(&spec, 2).unwrap();
        save_dataset(dir.path(), &spec, &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].frames.len(), ds[0].frames.len());
        assert_eq!(back[0].objects.len(), ds[0].objects.len());
        // quantisation to 8 bits then back is the only change
        for (orig, loaded) in ds[0].frames.iter().zip(&back[0].frames) {
            for (a, b) in orig.data().iter().zip(loaded.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
