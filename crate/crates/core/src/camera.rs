//! Keyboard actions → camera trajectories → Plücker ray maps → camera tokens.
//!
//! Camera frame follows the pinhole convention: +x right, +y down, +z forward.
//! Poses are world-from-camera.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{Mat, Scalar};

pub const DEFAULT_LINEAR_SPEED: f64 = 0.05;
pub const DEFAULT_ANGULAR_SPEED: f64 = PI / 90.0;
pub const PITCH_LIMIT: f64 = PI / 2.0 - 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKey {
    W,
    A,
    S,
    D,
    ArrowUp,
    ArrowDown,
    ArrowLeft,
    ArrowRight,
    Space,
    Idle,
}

impl ActionKey {
    pub const ALL: [ActionKey; 10] = [
        ActionKey::W,
        ActionKey::A,
        ActionKey::S,
        ActionKey::D,
        ActionKey::ArrowUp,
        ActionKey::ArrowDown,
        ActionKey::ArrowLeft,
        ActionKey::ArrowRight,
        ActionKey::Space,
        ActionKey::Idle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKey::W => "W",
            ActionKey::A => "A",
            ActionKey::S => "S",
            ActionKey::D => "D",
            ActionKey::ArrowUp => "ArrowUp",
            ActionKey::ArrowDown => "ArrowDown",
            ActionKey::ArrowLeft => "ArrowLeft",
            ActionKey::ArrowRight => "ArrowRight",
            ActionKey::Space => "Space",
            ActionKey::Idle => "Idle",
        }
    }
}

impl fmt::Display for ActionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActionKey::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown action key {s:?}")))
    }
}

fn default_linear() -> f64 {
    DEFAULT_LINEAR_SPEED
}

fn default_angular() -> f64 {
    DEFAULT_ANGULAR_SPEED
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub key: ActionKey,
    #[serde(rename = "duration")]
    pub duration_frames: usize,
    #[serde(default = "default_linear")]
    pub linear_speed: f64,
    #[serde(default = "default_angular")]
    pub angular_speed: f64,
}

impl ActionSegment {
    pub fn new(key: ActionKey, duration_frames: usize) -> Self {
        Self {
            key,
            duration_frames,
            linear_speed: DEFAULT_LINEAR_SPEED,
            angular_speed: DEFAULT_ANGULAR_SPEED,
        }
    }

    pub fn with_linear(mut self, speed: f64) -> Self {
        self.linear_speed = speed;
        self
    }

    pub fn with_angular(mut self, speed: f64) -> Self {
        self.angular_speed = speed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_frames == 0 {
            return Err(invalid("segment duration must be at least one frame"));
        }
        if !self.linear_speed.is_finite() || !self.angular_speed.is_finite() {
            return Err(Error::NonFinite("action segment speed"));
        }
        if self.linear_speed < 0.0 || self.angular_speed < 0.0 {
            return Err(invalid("segment speeds must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub position: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            position: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, position: Vector3<f64>) -> Self {
        Self { rotation, position }
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion components, normalizing.
    pub fn from_components(q: [f64; 4], p: [f64; 3]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = quat.norm();
        if !n.is_finite() || n < 1e-12 || p.iter().any(|v| !v.is_finite()) {
            return Err(invalid("pose components must be finite with a non-zero quaternion"));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_quaternion(quat),
            position: Vector3::from(p),
        })
    }

    /// `[qw, qx, qy, qz, px, py, pz]`
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.position.x,
            self.position.y,
            self.position.z,
        ]
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }

    pub fn right(&self) -> Vector3<f64> {
        self.rotation * Vector3::x()
    }

    pub fn up(&self) -> Vector3<f64> {
        -(self.rotation * Vector3::y())
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self {
            rotation: r,
            position: -(r * self.position),
        }
    }

    /// `self ∘ other` as world-from-camera composition.
    pub fn compose(&self, other: &CameraPose) -> Self {
        let mut r = self.rotation * other.rotation;
        r.renormalize();
        Self {
            rotation: r,
            position: self.position + self.rotation * other.position,
        }
    }

    pub fn quat_norm(&self) -> f64 {
        self.rotation.quaternion().norm()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<CameraPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<CameraPose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(invalid("trajectory must hold at least one pose"));
        }
        Ok(Self { poses })
    }

    pub fn single(pose: CameraPose) -> Self {
        Self { poses: vec![pose] }
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn last(&self) -> &CameraPose {
        self.poses.last().expect("trajectory is never empty")
    }

    /// Appends poses (not including a duplicate of the current last pose).
    pub fn extend_from(&mut self, poses: impl IntoIterator<Item = CameraPose>) {
        self.poses.extend(poses);
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.position).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "frame,qw,qx,qy,qz,px,py,pz")?;
        for (i, p) in self.poses.iter().enumerate() {
            let a = p.to_array();
            writeln!(
                w,
                "{i},{},{},{},{},{},{},{}",
                a[0], a[1], a[2], a[3], a[4], a[5], a[6]
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut poses = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (idx == 0 && line.starts_with("frame")) {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    msg: e.to_string(),
                })?;
            if vals.len() != 8 {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected 8 columns, found {}", vals.len()),
                });
            }
            poses.push(
                CameraPose::from_components(
                    [vals[1], vals[2], vals[3], vals[4]],
                    [vals[5], vals[6], vals[7]],
                )
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    msg: e.to_string(),
                })?,
            );
        }
        Trajectory::new(poses)
    }
}

fn local_step(pose: &CameraPose, seg: &ActionSegment) -> CameraPose {
    let lin = seg.linear_speed;
    let ang = seg.angular_speed;
    let (axis, angle, translation) = match seg.key {
        ActionKey::Idle => return *pose,
        ActionKey::W => (None, 0.0, Vector3::new(0.0, 0.0, lin)),
        ActionKey::S => (None, 0.0, Vector3::new(0.0, 0.0, -lin)),
        ActionKey::A => (None, 0.0, Vector3::new(-lin, 0.0, 0.0)),
        ActionKey::D => (None, 0.0, Vector3::new(lin, 0.0, 0.0)),
        ActionKey::Space => (None, 0.0, Vector3::new(0.0, -lin, 0.0)),
        ActionKey::ArrowLeft => (Some(-Vector3::y()), ang, Vector3::zeros()),
        ActionKey::ArrowRight => (Some(-Vector3::y()), -ang, Vector3::zeros()),
        ActionKey::ArrowUp => (Some(Vector3::x()), clamp_pitch(pose, ang), Vector3::zeros()),
        ActionKey::ArrowDown => (Some(Vector3::x()), clamp_pitch(pose, -ang), Vector3::zeros()),
    };
    let mut rotation = pose.rotation;
    if let Some(axis) = axis {
        let inc = UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle);
        rotation = rotation * inc;
        rotation.renormalize();
    }
    CameraPose {
        rotation,
        position: pose.position + rotation * translation,
    }
}

/// Pitch of the forward axis relative to the world up direction (−y).
pub fn pitch_of(pose: &CameraPose) -> f64 {
    let f = pose.forward();
    (-f.y).clamp(-1.0, 1.0).asin()
}

fn clamp_pitch(pose: &CameraPose, delta: f64) -> f64 {
    let current = pitch_of(pose);
    (current + delta).clamp(-PITCH_LIMIT, PITCH_LIMIT) - current
}

/// Integrates action segments frame by frame from `start`. The result holds
/// `1 + Σ duration_frames` poses, starting with `start` itself.
pub fn action_to_trajectory(segments: &[ActionSegment], start: CameraPose) -> Result<Trajectory> {
    if segments.is_empty() {
        return Err(invalid("action segment list is empty"));
    }
    let mut poses = Vec::with_capacity(1 + segments.iter().map(|s| s.duration_frames).sum::<usize>());
    poses.push(start);
    extend_poses(&mut poses, segments)?;
    Ok(Trajectory { poses })
}

/// Per-frame poses following `from` (exclusive) for the given segments.
pub fn integrate_segments(segments: &[ActionSegment], from: CameraPose) -> Result<Vec<CameraPose>> {
    let mut poses = vec![from];
    extend_poses(&mut poses, segments)?;
    poses.remove(0);
    Ok(poses)
}

fn extend_poses(poses: &mut Vec<CameraPose>, segments: &[ActionSegment]) -> Result<()> {
    for seg in segments {
        seg.validate()?;
    }
    let mut cur = *poses.last().expect("seeded with a start pose");
    for seg in segments {
        for _ in 0..seg.duration_frames {
            cur = local_step(&cur, seg);
            poses.push(cur);
        }
    }
    Ok(())
}

/// Parses `KEY duration [linear_speed] [angular_speed]` lines; `#` starts a comment.
pub fn parse_action_script(text: &str) -> Result<Vec<ActionSegment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(perr(format!("expected 2-4 fields, found {}", fields.len())));
        }
        let key: ActionKey = fields[0].parse().map_err(|e: Error| perr(e.to_string()))?;
        let duration: usize = fields[1]
            .parse()
            .map_err(|e: std::num::ParseIntError| perr(e.to_string()))?;
        let mut seg = ActionSegment::new(key, duration);
        if let Some(v) = fields.get(2) {
            seg.linear_speed = v.parse().map_err(|e: std::num::ParseFloatError| perr(e.to_string()))?;
        }
        if let Some(v) = fields.get(3) {
            seg.angular_speed = v.parse().map_err(|e: std::num::ParseFloatError| perr(e.to_string()))?;
        }
        seg.validate().map_err(|e| perr(e.to_string()))?;
        out.push(seg);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Degenerate(format!(
                "intrinsics need fx, fy > 0 (got fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }
}

/// World-frame ray through normalized image point `(u, v)`: `(d, m)`.
pub fn ray_at(pose: &CameraPose, intr: &Intrinsics, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
    let cam = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    let d = (pose.rotation * cam).normalize();
    let m = pose.position.cross(&d);
    (d, m)
}

/// Per-pixel 6-vectors `(d, m)`, row-major with `v` outer and `u` inner.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerMap {
    height: usize,
    width: usize,
    data: Vec<[f64; 6]>,
}

impl PluckerMap {
    pub fn from_pixels(height: usize, width: usize, data: Vec<[f64; 6]>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(shape("plucker map dimensions do not match pixel count"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![[0.0; 6]; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64; 6] {
        &self.data[row * self.width + col]
    }

    pub fn pixels(&self) -> &[[f64; 6]] {
        &self.data
    }
}

/// Normalized coordinate of pixel center `i` along an axis with `n` pixels, in (−1, 1).
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

pub fn pose_to_plucker(
    pose: &CameraPose,
    intr: &Intrinsics,
    height: usize,
    width: usize,
) -> Result<PluckerMap> {
    intr.validate()?;
    if height == 0 || width == 0 {
        return Err(invalid("plucker map needs positive height and width"));
    }
    let mut data = Vec::with_capacity(height * width);
    for row in 0..height {
        let v = pixel_center(row, height);
        for col in 0..width {
            let u = pixel_center(col, width);
            let (d, m) = ray_at(pose, intr, u, v);
            data.push([d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    Ok(PluckerMap {
        height,
        width,
        data,
    })
}

/// Average-pools the map onto `(rows, cols)` tokens: an `(rows·cols) × 6` matrix.
pub fn pool_plucker<F: Scalar>(map: &PluckerMap, token_grid: (usize, usize)) -> Result<Mat<F>> {
    let (rows, cols) = token_grid;
    if rows == 0 || cols == 0 || map.height % rows != 0 || map.width % cols != 0 {
        return Err(shape(format!(
            "token grid {rows}x{cols} does not divide pixel grid {}x{}",
            map.height, map.width
        )));
    }
    let bh = map.height / rows;
    let bw = map.width / cols;
    let inv = 1.0 / (bh * bw) as f64;
    let mut out = Mat::zeros(rows * cols, 6);
    for tr in 0..rows {
        for tc in 0..cols {
            let mut acc = [0.0f64; 6];
            for r in tr * bh..(tr + 1) * bh {
                for c in tc * bw..(tc + 1) * bw {
                    for (a, &x) in acc.iter_mut().zip(map.pixel(r, c)) {
                        *a += x;
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out.set(tr * cols + tc, ch, F::of(a * inv));
            }
        }
    }
    Ok(out)
}

/// Pools to the token grid, then lifts 6 → C with `projection` (6 × C).
pub fn plucker_to_tokens<F: Scalar>(
    map: &PluckerMap,
    token_grid: (usize, usize),
    projection: &Mat<F>,
) -> Result<Mat<F>> {
    if projection.rows() != 6 {
        return Err(shape("camera projection must have 6 input rows"));
    }
    Ok(pool_plucker::<F>(map, token_grid)?.matmul(projection))
}

/// Sampling resolution and token grid used to turn poses into camera features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PluckerConfig {
    pub height: usize,
    pub width: usize,
    pub token_grid: (usize, usize),
    pub intrinsics: Intrinsics,
}

impl Default for PluckerConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            token_grid: (4, 4),
            intrinsics: Intrinsics::default(),
        }
    }
}

impl PluckerConfig {
    /// Pooled `(frames·T) × 6` features for consecutive poses.
    pub fn features<F: Scalar>(&self, poses: &[CameraPose]) -> Result<Mat<F>> {
        let mut parts = Vec::with_capacity(poses.len());
        for p in poses {
            let map = pose_to_plucker(p, &self.intrinsics, self.height, self.width)?;
            parts.push(pool_plucker::<F>(&map, self.token_grid)?);
        }
        let refs: Vec<&Mat<F>> = parts.iter().collect();
        Ok(Mat::concat_rows(&refs))
    }
}
