//! Trajectory accuracy (Sim3 alignment, relative pose error), a motion
//! magnitude metric, and InterBench interaction scores.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Mat, Scalar};

/// `x ↦ s·R·x + t`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    scale: f64,
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Sim3 {
    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(invalid("Sim3 scale must be positive"));
        }
        if (rotation.quaternion().norm() - 1.0).abs() > 1e-9 || translation.iter().any(|v| !v.is_finite()) {
            return Err(invalid("Sim3 needs a unit rotation and a finite translation"));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Moves the camera center and rotates its orientation.
    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose::new(self.rotation * pose.rotation, self.apply_point(&pose.position))
    }

    pub fn apply(&self, traj: &Trajectory) -> Trajectory {
        Trajectory::new(traj.poses().iter().map(|p| self.apply_pose(p)).collect()).expect("non-empty input")
    }

    /// Largest of the scale, rotation-angle and translation discrepancies.
    pub fn distance(&self, other: &Sim3) -> f64 {
        let ds = (self.scale - other.scale).abs();
        let dr = self.rotation.angle_to(&other.rotation);
        let dt = (self.translation - other.translation).norm();
        ds.max(dr).max(dt)
    }
}

/// Least-squares similarity transform taking `est` positions onto `gt`.
pub fn umeyama_align(est: &Trajectory, gt: &Trajectory) -> Result<Sim3> {
    if est.len() != gt.len() {
        return Err(invalid("trajectories differ in length"));
    }
    let n = est.len();
    if n < 3 {
        return Err(invalid("alignment needs at least three poses"));
    }
    let xs = est.positions();
    let ys = gt.positions();
    let nf = n as f64;
    let mx = xs.iter().sum::<Vector3<f64>>() / nf;
    let my = ys.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - mx;
        cov += (y - my) * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= nf;
    var_x /= nf;

    let mut x_cov = Matrix3::zeros();
    for x in &xs {
        let dx = x - mx;
        x_cov += dx * dx.transpose();
    }
    let x_sv = x_cov.svd(false, false).singular_values;
    let mut sorted: Vec<f64> = x_sv.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if var_x <= 1e-300 || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Error::Degenerate("estimate positions are collinear or coincident".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = svd.singular_values;
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let trace: f64 = (0..3).map(|i| d[i] * s[(i, i)]).sum();
    let scale = trace / var_x;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Degenerate("alignment scale is not positive".into()));
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = my - scale * (rotation * mx);
    Sim3::new(scale, rotation, translation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpeResult {
    pub delta: usize,
    pub trans_rmse: f64,
    pub rot_rmse: f64,
    pub trans_residuals: Vec<f64>,
    pub rot_residuals: Vec<f64>,
}

/// Relative pose error over pose pairs `δ` apart. `est` is assumed aligned.
pub fn rpe(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<RpeResult> {
    if est.len() != gt.len() {
        return Err(invalid("trajectories differ in length"));
    }
    if delta == 0 || delta >= est.len() {
        return Err(invalid(format!("delta {delta} must lie in [1, {})", est.len())));
    }
    let (e, g) = (est.poses(), gt.poses());
    let mut trans = Vec::with_capacity(e.len() - delta);
    let mut rot = Vec::with_capacity(e.len() - delta);
    for i in 0..e.len() - delta {
        let rel_gt = g[i].inverse().compose(&g[i + delta]);
        let rel_est = e[i].inverse().compose(&e[i + delta]);
        let err = rel_gt.inverse().compose(&rel_est);
        trans.push(err.position.norm());
        rot.push(err.rotation.angle());
    }
    let rmse = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    Ok(RpeResult {
        delta,
        trans_rmse: rmse(&trans),
        rot_rmse: rmse(&rot),
        trans_residuals: trans,
        rot_residuals: rot,
    })
}

/// Aligns `est` onto `gt` with [`umeyama_align`], then evaluates [`rpe`].
pub fn aligned_rpe(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<(Sim3, RpeResult)> {
    let sim = umeyama_align(est, gt)?;
    let r = rpe(&sim.apply(est), gt, delta)?;
    Ok((sim, r))
}

/// Per-token displacement magnitudes between consecutive frames.
pub trait FlowBackend {
    fn name(&self) -> &str;
    fn displacement(&self, a: &Mat<f64>, b: &Mat<f64>) -> Vec<f64>;
}

/// Mean absolute channel difference per token.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameDifference;

impl FlowBackend for FrameDifference {
    fn name(&self) -> &str {
        "frame_difference"
    }

    fn displacement(&self, a: &Mat<f64>, b: &Mat<f64>) -> Vec<f64> {
        (0..a.rows())
            .map(|r| {
                a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.cols() as f64
            })
            .collect()
    }
}

/// Mean over consecutive frame pairs of the mean per-token displacement.
pub fn dynamic_average<F: Scalar>(frames: &[Mat<F>], backend: &dyn FlowBackend) -> Result<f64> {
    if frames.len() < 2 {
        return Err(invalid("dynamic average needs at least two frames"));
    }
    let shape = frames[0].shape();
    if frames.iter().any(|f| f.shape() != shape) {
        return Err(crate::error::shape("frames differ in shape"));
    }
    let frames: Vec<Mat<f64>> = frames.iter().map(Mat::cast).collect();
    let total: f64 = frames
        .windows(2)
        .map(|w| {
            let d = backend.displacement(&w[0], &w[1]);
            d.iter().sum::<f64>() / d.len().max(1) as f64
        })
        .sum();
    Ok(total / (frames.len() - 1) as f64)
}

pub const ORDINAL_SCORES: [u8; 4] = [0, 1, 3, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterBenchCategory {
    Environmental,
    Actor,
    Entity,
}

impl InterBenchCategory {
    pub const ALL: [InterBenchCategory; 3] = [Self::Environmental, Self::Actor, Self::Entity];

    pub fn name(self) -> &'static str {
        match self {
            Self::Environmental => "environmental",
            Self::Actor => "actor",
            Self::Entity => "entity",
        }
    }
}

impl fmt::Display for InterBenchCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterBenchCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace([' ', '-', '&'], "_").as_str() {
            "environmental" | "environmental_interactions" | "environment" => Ok(Self::Environmental),
            "actor" | "actor_actions" | "action" => Ok(Self::Actor),
            "entity" | "entity_object_appearances" | "entity__object_appearances" | "appearance" => {
                Ok(Self::Entity)
            }
            other => Err(invalid(format!("unknown interaction category '{other}'"))),
        }
    }
}

/// One judged video. Construction enforces the ordinal scales and gating.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct InterBenchRecord {
    video_id: String,
    category: InterBenchCategory,
    trigger: u8,
    /// align, fluency, scope, end_state, physics
    dims: [u8; 5],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawRecord {
    video_id: String,
    category: String,
    trigger: u8,
    align: u8,
    fluency: u8,
    scope: u8,
    end_state: u8,
    physics: u8,
}

impl TryFrom<RawRecord> for InterBenchRecord {
    type Error = Error;

    fn try_from(r: RawRecord) -> Result<Self> {
        InterBenchRecord::new(
            r.video_id,
            r.category.parse()?,
            r.trigger,
            [r.align, r.fluency, r.scope, r.end_state, r.physics],
        )
    }
}

impl From<InterBenchRecord> for RawRecord {
    fn from(r: InterBenchRecord) -> Self {
        let [align, fluency, scope, end_state, physics] = r.dims;
        RawRecord {
            video_id: r.video_id,
            category: r.category.name().to_string(),
            trigger: r.trigger,
            align,
            fluency,
            scope,
            end_state,
            physics,
        }
    }
}

impl InterBenchRecord {
    /// `dims` is `[align, fluency, scope, end_state, physics]`.
    pub fn new(video_id: impl Into<String>, category: InterBenchCategory, trigger: u8, dims: [u8; 5]) -> Result<Self> {
        if trigger > 1 {
            return Err(invalid(format!("trigger must be 0 or 1, got {trigger}")));
        }
        if let Some(bad) = dims.iter().find(|d| !ORDINAL_SCORES.contains(d)) {
            return Err(invalid(format!("dimension score {bad} is not in {{0, 1, 3, 5}}")));
        }
        if trigger == 0 && dims.iter().any(|&d| d != 0) {
            return Err(invalid("an untriggered interaction must score 0 on every dimension"));
        }
        Ok(Self {
            video_id: video_id.into(),
            category,
            trigger,
            dims,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn category(&self) -> InterBenchCategory {
        self.category
    }

    pub fn means(&self) -> DimensionMeans {
        let d = self.dims.map(f64::from);
        DimensionMeans {
            trigger: f64::from(self.trigger),
            align: d[0],
            fluency: d[1],
            scope: d[2],
            end_state: d[3],
            physics: d[4],
        }
    }

    pub fn overall(&self) -> f64 {
        self.means().overall_unchecked()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionMeans {
    pub trigger: f64,
    pub align: f64,
    pub fluency: f64,
    pub scope: f64,
    pub end_state: f64,
    pub physics: f64,
}

impl DimensionMeans {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.trigger) {
            return Err(invalid("trigger mean must lie in [0, 1]"));
        }
        let dims = [self.align, self.fluency, self.scope, self.end_state, self.physics];
        if dims.iter().any(|d| !(0.0..=5.0).contains(d)) {
            return Err(invalid("dimension means must lie in [0, 5]"));
        }
        Ok(())
    }

    fn overall_unchecked(&self) -> f64 {
        (5.0 * self.trigger + self.align + self.fluency + self.scope + self.end_state + self.physics) / 6.0
    }
}

/// `(5·Trigger + Align + Fluency + Scope + EndState + Physics) / 6`
pub fn interbench_overall(m: &DimensionMeans) -> Result<f64> {
    m.validate()?;
    Ok(m.overall_unchecked())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: InterBenchCategory,
    pub count: usize,
    #[serde(flatten)]
    pub means: DimensionMeans,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterBenchReport {
    pub categories: Vec<CategoryReport>,
    /// Mean of the category Overall scores.
    pub overall: f64,
}

/// Per-category means and Overall, plus the mean of category Overalls.
/// Every category in `categories` must have at least one record.
pub fn aggregate(records: &[InterBenchRecord], categories: &[InterBenchCategory]) -> Result<InterBenchReport> {
    if records.is_empty() {
        return Err(invalid("no records to aggregate"));
    }
    if categories.is_empty() {
        return Err(invalid("no categories requested"));
    }
    let mut groups: BTreeMap<InterBenchCategory, Vec<&InterBenchRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.category).or_default().push(r);
    }
    let mut reports = Vec::with_capacity(categories.len());
    for &c in categories {
        let rs = groups
            .get(&c)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| invalid(format!("category '{c}' has no records")))?;
        let n = rs.len() as f64;
        let mean = |f: fn(&DimensionMeans) -> f64| rs.iter().map(|r| f(&r.means())).sum::<f64>() / n;
        let means = DimensionMeans {
            trigger: mean(|m| m.trigger),
            align: mean(|m| m.align),
            fluency: mean(|m| m.fluency),
            scope: mean(|m| m.scope),
            end_state: mean(|m| m.end_state),
            physics: mean(|m| m.physics),
        };
        reports.push(CategoryReport {
            category: c,
            count: rs.len(),
            means,
            overall: interbench_overall(&means)?,
        });
    }
    let overall = reports.iter().map(|r| r.overall).sum::<f64>() / reports.len() as f64;
    Ok(InterBenchReport {
        categories: reports,
        overall,
    })
}

/// Aggregates over every category present in `records`, in canonical order.
pub fn aggregate_present(records: &[InterBenchRecord]) -> Result<InterBenchReport> {
    let present: Vec<InterBenchCategory> = InterBenchCategory::ALL
        .into_iter()
        .filter(|c| records.iter().any(|r| r.category == *c))
        .collect();
    aggregate(records, &present)
}

pub const RECORDS_HEADER: [&str; 8] = [
    "video_id",
    "category",
    "trigger",
    "align",
    "fluency",
    "scope",
    "end_state",
    "physics",
];

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<InterBenchRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(crate::train::csv_err)?.clone();
    if header.iter().ne(RECORDS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", RECORDS_HEADER.join(",")),
        });
    }
    rdr.deserialize::<RawRecord>()
        .enumerate()
        .map(|(i, row)| {
            let raw = row.map_err(crate::train::csv_err)?;
            InterBenchRecord::try_from(raw).map_err(|e| Error::Parse {
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_records_csv<W: std::io::Write>(writer: W, records: &[InterBenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record(RECORDS_HEADER).map_err(crate::train::csv_err)?;
    }
    for r in records {
        w.serialize(RawRecord::from(r.clone())).map_err(crate::train::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn spiral(n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    let a = i as f64 * 0.3;
                    CameraPose::new(
                        UnitQuaternion::from_euler_angles(0.1 * a, a, 0.0),
                        Vector3::new(a.cos(), a.sin(), 0.2 * a),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_alignment() {
        let t = spiral(12);
        let s = umeyama_align(&t, &t).unwrap();
        assert!(s.distance(&Sim3::identity()) < 1e-9);
    }

    #[test]
    fn known_transform_recovered() {
        let est = spiral(10);
        let truth = Sim3::new(
            2.0,
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
            Vector3::new(1.0, 2.0, 3.0),
        )
        .unwrap();
        let gt = truth.apply(&est);
        let got = umeyama_align(&est, &gt).unwrap();
        assert!(got.distance(&truth) < 1e-8, "{got:?}");
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let line = Trajectory::new(
            (0..5)
                .map(|i| CameraPose::new(UnitQuaternion::identity(), Vector3::new(i as f64, 0.0, 0.0)))
                .collect(),
        )
        .unwrap();
        assert!(matches!(umeyama_align(&line, &line), Err(Error::Degenerate(_))));
        assert!(umeyama_align(&spiral(2), &spiral(2)).is_err());
        assert!(umeyama_align(&spiral(4), &spiral(5)).is_err());
        assert!(rpe(&spiral(4), &spiral(4), 4).is_err());
        assert!(rpe(&spiral(4), &spiral(4), 0).is_err());
    }

    #[test]
    fn rpe_zero_on_identical_and_sized_residuals() {
        let t = spiral(8);
        let r = rpe(&t, &t, 2).unwrap();
        assert_eq!(r.trans_residuals.len(), 6);
        assert!(r.trans_rmse < 1e-12 && r.rot_rmse < 1e-7);
    }

    #[test]
    fn dynamic_average_closed_forms() {
        let a = Mat::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.1);
        let b = a.map(|x| x + 0.7);
        assert_eq!(dynamic_average(&[a.clone(), a.clone(), a.clone()], &FrameDifference).unwrap(), 0.0);
        let alt = dynamic_average(&[a.clone(), b.clone(), a.clone(), b], &FrameDifference).unwrap();
        assert!((alt - 0.7).abs() < 1e-12);
        assert!(dynamic_average(&[a], &FrameDifference).is_err());
    }

    #[test]
    fn record_gating_and_scales() {
        use InterBenchCategory::*;
        assert!(InterBenchRecord::new("v", Actor, 0, [0; 5]).is_ok());
        assert!(InterBenchRecord::new("v", Actor, 0, [0, 0, 1, 0, 0]).is_err());
        assert!(InterBenchRecord::new("v", Actor, 1, [5, 5, 4, 5, 5]).is_err());
        assert!(InterBenchRecord::new("v", Actor, 2, [5; 5]).is_err());
        assert_eq!(InterBenchRecord::new("v", Actor, 1, [5; 5]).unwrap().overall(), 5.0);
        assert_eq!(InterBenchRecord::new("v", Actor, 0, [0; 5]).unwrap().overall(), 0.0);
    }

    #[test]
    fn two_record_aggregate() {
        use InterBenchCategory::*;
        let rs = vec![
            InterBenchRecord::new("a", Entity, 1, [5; 5]).unwrap(),
            InterBenchRecord::new("b", Entity, 0, [0; 5]).unwrap(),
        ];
        let rep = aggregate(&rs, &[Entity]).unwrap();
        assert_eq!(rep.categories[0].means.align, 2.5);
        assert_eq!(rep.categories[0].means.trigger, 0.5);
        assert!(aggregate(&rs, &[Entity, Actor]).is_err());
    }

    #[test]
    fn records_csv_round_trip() {
        use InterBenchCategory::*;
        let rs = vec![
            InterBenchRecord::new("a", Environmental, 1, [5, 3, 1, 0, 5]).unwrap(),
            InterBenchRecord::new("b", Actor, 0, [0; 5]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &rs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("video_id,category,trigger,align,fluency,scope,end_state,physics\n"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), rs);

        let bad = "video_id,category,trigger,align,fluency,scope,end_state,physics\nx,actor,0,3,0,0,0,0\n";
        assert!(matches!(read_records_csv(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(read_records_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
