//! Deterministic synthetic world: textured squares in front of a far
//! background, ray-cast per pixel with an exact depth buffer.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, CameraPose, Extrinsics, Intrinsics, Point2, Point3};
use crate::raster::DepthMap;

pub type ObjectStates = BTreeMap<u32, Point3>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("duplicate object id {0}")]
    DuplicateId(u32),
    #[error("object {id}: {reason}")]
    InvalidObject { id: u32, reason: String },
    #[error("unknown object id {0}")]
    UnknownObject(u32),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
}

/// Square in a world plane of constant z, centered at `position`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    #[serde(rename = "pos")]
    pub position: Point3,
    pub half_extent: f64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub seed: u64,
    /// Camera-frame depth reported wherever no object is hit.
    pub depth: f64,
}

impl Default for Background {
    fn default() -> Self {
        Self { seed: 0, depth: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneRepr", into = "SceneRepr")]
pub struct SyntheticScene {
    width: u32,
    height: u32,
    background: Background,
    objects: Vec<SceneObject>,
    intrinsics: Intrinsics,
}

#[derive(Serialize, Deserialize)]
struct SceneRepr {
    frame: [u32; 2],
    #[serde(default)]
    background: Background,
    objects: Vec<SceneObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<PinholeParams>,
}

impl TryFrom<SceneRepr> for SyntheticScene {
    type Error = SceneError;
    fn try_from(r: SceneRepr) -> Result<Self, SceneError> {
        let [w, h] = r.frame;
        let k = match r.intrinsics {
            Some(p) => Intrinsics::new(p.fx, p.fy, p.cx, p.cy, w, h)?,
            None => SyntheticScene::default_intrinsics(w, h)?,
        };
        SyntheticScene::new(k, r.background, r.objects)
    }
}

impl From<SyntheticScene> for SceneRepr {
    fn from(s: SyntheticScene) -> Self {
        let k = s.intrinsics;
        SceneRepr {
            frame: [s.width, s.height],
            background: s.background,
            objects: s.objects,
            intrinsics: Some(PinholeParams { fx: k.fx(), fy: k.fy(), cx: k.cx(), cy: k.cy() }),
        }
    }
}

impl SyntheticScene {
    /// Focal length of half the frame width, principal point at the center.
    pub fn default_intrinsics(width: u32, height: u32) -> Result<Intrinsics, SceneError> {
        let f = f64::from(width) / 2.0;
        Ok(Intrinsics::new(f, f, f64::from(width) / 2.0, f64::from(height) / 2.0, width, height)?)
    }

    pub fn new(intrinsics: Intrinsics, background: Background, mut objects: Vec<SceneObject>) -> Result<Self, SceneError> {
        if !(background.depth > 0.0) || !background.depth.is_finite() {
            return Err(SceneError::Invalid(format!("background depth must be positive, got {}", background.depth)));
        }
        objects.sort_by_key(|o| o.id);
        for w in objects.windows(2) {
            if w[0].id == w[1].id {
                return Err(SceneError::DuplicateId(w[0].id));
            }
        }
        for o in &objects {
            if !(o.half_extent > 0.0) || !o.half_extent.is_finite() {
                return Err(SceneError::InvalidObject { id: o.id, reason: format!("half_extent must be positive, got {}", o.half_extent) });
            }
            if !o.position.coords.iter().all(|v| v.is_finite()) {
                return Err(SceneError::InvalidObject { id: o.id, reason: "position must be finite".into() });
            }
        }
        Ok(Self { width: intrinsics.width(), height: intrinsics.height(), background, objects, intrinsics })
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        serde_json::from_str(text).map_err(|e| SceneError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }
    pub fn background(&self) -> &Background {
        &self.background
    }
    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn object(&self, id: u32) -> Result<&SceneObject, SceneError> {
        self.objects.iter().find(|o| o.id == id).ok_or(SceneError::UnknownObject(id))
    }

    pub fn initial_states(&self) -> ObjectStates {
        self.objects.iter().map(|o| (o.id, o.position)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub index: usize,
    pub image: RgbImage,
    pub depth: DepthMap,
    /// Projected object centers; `None` when behind the camera or outside
    /// the frame.
    pub centroids: BTreeMap<u32, Option<Point2>>,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_color(seed: u64, a: i64, b: i64) -> Rgb<u8> {
    let h = mix64(seed ^ mix64((a as u64).wrapping_mul(0x1000_0000_01B3) ^ mix64(b as u64)));
    Rgb([(h & 0xff) as u8, ((h >> 8) & 0xff) as u8, ((h >> 16) & 0xff) as u8])
}

/// Texture cells per side of an object.
const TEXTURE_CELLS: f64 = 4.0;

fn object_color(o: &SceneObject, u: f64, v: f64) -> Rgb<u8> {
    let a = ((u * TEXTURE_CELLS) as i64).min(TEXTURE_CELLS as i64 - 1);
    let b = ((v * TEXTURE_CELLS) as i64).min(TEXTURE_CELLS as i64 - 1);
    let Rgb([r, g, bl]) = hash_color(o.texture_seed, a, b);
    // Keep objects bright so they stand out from the darker background.
    Rgb([128 | r, 128 | g, 128 | bl])
}

fn background_color(seed: u64, dir: &Vector3<f64>) -> Rgb<u8> {
    let d = dir.normalize();
    let yaw = d.x.atan2(d.z);
    let pitch = d.y.asin();
    let step = 0.08;
    let Rgb([r, g, b]) = hash_color(seed, (yaw / step).floor() as i64, (pitch / step).floor() as i64);
    Rgb([r >> 2, g >> 2, b >> 2])
}

/// Camera-frame depth and texture coordinates where the ray from the
/// camera center along world direction `dir` meets the object's square.
fn intersect(o: &SceneObject, position: &Point3, origin: &Point3, dir: &Vector3<f64>, cam_dir_z: f64) -> Option<(f64, f64, f64)> {
    if dir.z.abs() < 1e-15 {
        return None;
    }
    let s = (position.z - origin.z) / dir.z;
    if !(s > 0.0) {
        return None;
    }
    let hit = origin + dir * s;
    let (dx, dy) = (hit.x - position.x, hit.y - position.y);
    let h = o.half_extent;
    if dx < -h || dx >= h || dy < -h || dy >= h {
        return None;
    }
    Some((s * cam_dir_z, (dx + h) / (2.0 * h), (dy + h) / (2.0 * h)))
}

/// Ray-casts every pixel center. Objects missing from `states` are drawn at
/// their initial position. Equal depths resolve to the lower object id.
pub fn render(scene: &SyntheticScene, states: &ObjectStates, k: &Intrinsics, e: &Extrinsics, index: usize) -> RenderedFrame {
    let (w, h) = (k.width(), k.height());
    let mut image = RgbImage::new(w, h);
    let mut depth = DepthMap::filled(w, h, scene.background.depth);
    let inv = e.inverse();
    let origin = e.center();
    let placed: Vec<(&SceneObject, Point3)> =
        scene.objects.iter().map(|o| (o, states.get(&o.id).copied().unwrap_or(o.position))).collect();
    for y in 0..h {
        for x in 0..w {
            let q = k.normalize(&Point2::new(f64::from(x) + 0.5, f64::from(y) + 0.5));
            let dir = inv.transform_vector(&Vector3::new(q.x, q.y, 1.0));
            let mut best: Option<(f64, Rgb<u8>)> = None;
            for (o, pos) in &placed {
                if let Some((z, u, v)) = intersect(o, pos, &origin, &dir, 1.0) {
                    if best.is_none_or(|(bz, _)| z < bz) {
                        best = Some((z, object_color(o, u, v)));
                    }
                }
            }
            match best {
                Some((z, c)) => {
                    depth.set(x, y, z);
                    image.put_pixel(x, y, c);
                }
                None => image.put_pixel(x, y, background_color(scene.background.seed, &dir)),
            }
        }
    }
    let centroids = placed
        .iter()
        .map(|(o, pos)| {
            let p = geometry::project(k, e, pos);
            (o.id, p.visible(k).then_some(p.pixel))
        })
        .collect();
    RenderedFrame { index, image, depth, centroids }
}

/// Object hit by the ray through the exact pixel `p` (not the cell center),
/// with its camera-frame depth.
pub fn surface_at(scene: &SyntheticScene, states: &ObjectStates, k: &Intrinsics, e: &Extrinsics, p: &Point2) -> Option<(u32, f64)> {
    let q = k.normalize(p);
    let dir = e.inverse().transform_vector(&Vector3::new(q.x, q.y, 1.0));
    let origin = e.center();
    let mut best: Option<(u32, f64)> = None;
    for o in &scene.objects {
        let pos = states.get(&o.id).copied().unwrap_or(o.position);
        if let Some((z, _, _)) = intersect(o, &pos, &origin, &dir, 1.0) {
            if best.is_none_or(|(_, bz)| z < bz) {
                best = Some((o.id, z));
            }
        }
    }
    best
}

/// Exact depth buffer, optionally with additive Gaussian noise on object and
/// background pixels. Noisy values are clamped to stay positive.
pub fn depth_oracle(frame: &RenderedFrame, noise_sigma: f64, seed: u64) -> DepthMap {
    if !(noise_sigma > 0.0) {
        return frame.depth.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(frame.index as u64)));
    let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
    let mut out = frame.depth.clone();
    for v in out.values_mut() {
        if *v > 0.0 {
            *v = (*v + normal.sample(&mut rng)).max(1e-6);
        }
    }
    out
}

/// Centroid sequence of object `id`; `None` marks off-screen frames.
pub fn ground_truth_track(frames: &[RenderedFrame], id: u32) -> Result<Vec<Option<Point2>>, SceneError> {
    frames
        .iter()
        .map(|f| f.centroids.get(&id).copied().ok_or(SceneError::UnknownObject(id)))
        .collect()
}

/// Plane an object translates in, in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPlane {
    pub point: Point3,
    pub normal: Vector3<f64>,
}

impl MotionPlane {
    /// World point where the ray through pixel `p` of camera `cam` meets the
    /// plane, if it does so in front of the camera.
    pub fn intersect_pixel(&self, cam: &CameraPose, p: &Point2) -> Option<Point3> {
        let q = cam.intrinsics.normalize(p);
        let dir = cam.extrinsics.inverse().transform_vector(&Vector3::new(q.x, q.y, 1.0));
        let origin = cam.extrinsics.center();
        let denom = self.normal.dot(&dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = self.normal.dot(&(self.point - origin)) / denom;
        (s > 0.0).then(|| origin + dir * s)
    }

    /// Intersection with the line through `a` and `b` (either direction).
    pub fn intersect_line(&self, a: &Point3, b: &Point3) -> Option<Point3> {
        let dir = b - a;
        let denom = self.normal.dot(&dir);
        if denom.abs() < 1e-12 * dir.norm().max(1e-300) {
            return None;
        }
        Some(a + dir * (self.normal.dot(&(self.point - a)) / denom))
    }
}

/// Where a commanded object's tracked point should be this frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommandTarget {
    /// Tracked point placed at a world position.
    World(Point3),
    /// Tracked point placed where the line from the camera center through
    /// `through` meets `plane`; `fallback` is used when the line is parallel
    /// to the plane.
    Ray { through: Point3, plane: MotionPlane, fallback: Point3 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectCommand {
    pub object_id: u32,
    /// Object center minus its tracked point (objects only translate).
    pub body_offset: Vector3<f64>,
    pub target: CommandTarget,
}

impl ObjectCommand {
    /// World position of the commanded tracked point under `camera`.
    pub fn tracked_point(&self, camera: &CameraPose) -> Point3 {
        match self.target {
            CommandTarget::World(p) => p,
            CommandTarget::Ray { through, plane, fallback } => {
                plane.intersect_line(&camera.extrinsics.center(), &through).unwrap_or(fallback)
            }
        }
    }
}

/// Object positions for one frame: commanded objects follow their targets,
/// all others stay at their initial positions.
pub fn step_objects(scene: &SyntheticScene, commands: &[ObjectCommand], camera: &CameraPose) -> Result<ObjectStates, SceneError> {
    let mut states = scene.initial_states();
    for c in commands {
        let slot = states.get_mut(&c.object_id).ok_or(SceneError::UnknownObject(c.object_id))?;
        *slot = c.tracked_point(camera) + c.body_offset;
    }
    Ok(states)
}
