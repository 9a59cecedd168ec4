//! Map exchange files, scenario specs, and GeoJSON export.
//!
//! The exchange format is versioned JSON. Control-point covariances are
//! stored as the upper triangle `[xx, xy, xz, yy, yz, zz]`; poses as unit
//! quaternion `[w, x, y, z]` plus translation. Serialization uses
//! shortest-round-trip decimal floats, so load/save cycles are bit-exact.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::se3::PoseSe3;
use crate::sim::{
    DriveLaneLine, DriveMap, GnssFix, GroundTruthMap, OdometryMeasurement, ScenarioSpec,
    SignObservationRecord,
};
use crate::spline::{BsplineTrajectory, GaussianControlPoint};

pub const MAP_FILE_VERSION: u32 = 1;

/// What a map file contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFileKind {
    /// Simulated ground truth: polylines and signs.
    GroundTruth,
    /// Per-drive maps plus the raw measurements for graph building.
    DriveSet,
    /// A fused lane-line map.
    FusedMap,
}

/// Provenance of a map file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MapFileMetadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlPointRecord {
    pub mean: [f64; 3],
    /// Upper triangle of the covariance: `[xx, xy, xz, yy, yz, zz]`.
    pub covariance: [f64; 6],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneLineRecord {
    pub drive_id: i64,
    pub birth_time: i64,
    pub control_points: Vec<ControlPointRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_point_steps: Option<Vec<i64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub step: u32,
    /// Unit quaternion as `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignRecord {
    pub sign_id: u32,
    pub step: u32,
    pub position: [f64; 3],
    pub vehicle_frame: [f64; 3],
    pub covariance: [f64; 6],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnssRecord {
    pub step: u32,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdometryRecord {
    pub from_step: u32,
    pub to_step: u32,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanDetectionsRecord {
    pub step: u32,
    /// Detection positions per detected lane instance.
    pub per_lane: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriveRecord {
    pub drive_id: u32,
    pub poses: Vec<PoseRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scans: Vec<ScanDetectionsRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lane_lines: Vec<LaneLineRecord>,
    pub signs: Vec<SignRecord>,
    pub gnss_fixes: Vec<GnssRecord>,
    pub odometry: Vec<OdometryRecord>,
    pub gnss_sigma: f64,
    pub odometry_sigma: f64,
    pub odometry_rot_sigma: f64,
    pub detection_sigma: f64,
    pub poisson_rate: f64,
}

/// The on-disk map exchange format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapExchangeFile {
    pub version: u32,
    pub kind: MapFileKind,
    pub metadata: MapFileMetadata,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthMap>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drives: Vec<DriveRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lane_lines: Vec<LaneLineRecord>,
}

fn upper_triangle(m: &Matrix3<f64>) -> [f64; 6] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 2)],
    ]
}

fn from_upper_triangle(t: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(
        t[0], t[1], t[2], t[1], t[3], t[4], t[2], t[4], t[5],
    )
}

fn vec3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn pose_fields(p: &PoseSe3) -> ([f64; 4], [f64; 3]) {
    let q = p.rotation.quaternion();
    ([q.w, q.i, q.j, q.k], vec3(&p.translation))
}

fn pose_from_fields(rotation: &[f64; 4], translation: &[f64; 3]) -> PoseSe3 {
    PoseSe3::new(
        UnitQuaternion::from_quaternion(Quaternion::new(
            rotation[0],
            rotation[1],
            rotation[2],
            rotation[3],
        )),
        Vector3::from_column_slice(translation),
    )
}

/// Converts a trajectory to its exchange record.
pub fn lane_line_record(
    traj: &BsplineTrajectory,
    drive_id: i64,
    steps: Option<&[i64]>,
) -> LaneLineRecord {
    LaneLineRecord {
        drive_id,
        birth_time: traj.birth_time,
        control_points: traj
            .control_points()
            .iter()
            .map(|cp| ControlPointRecord {
                mean: vec3(&cp.mean),
                covariance: upper_triangle(&cp.covariance()),
            })
            .collect(),
        control_point_steps: steps.map(|s| s.to_vec()),
    }
}

/// Rebuilds a trajectory from its exchange record.
pub fn lane_line_from_record(record: &LaneLineRecord) -> Result<BsplineTrajectory> {
    let cps = record
        .control_points
        .iter()
        .map(|cp| {
            GaussianControlPoint::new(
                Vector3::from_column_slice(&cp.mean),
                from_upper_triangle(&cp.covariance),
            )
        })
        .collect();
    BsplineTrajectory::new(record.birth_time, cps)
}

fn drive_record(drive: &DriveMap) -> DriveRecord {
    DriveRecord {
        drive_id: drive.drive_id,
        poses: drive
            .poses
            .iter()
            .map(|(step, p)| {
                let (rotation, translation) = pose_fields(p);
                PoseRecord {
                    step: *step,
                    rotation,
                    translation,
                }
            })
            .collect(),
        scans: drive
            .scans
            .iter()
            .map(|s| ScanDetectionsRecord {
                step: s.step,
                per_lane: s
                    .per_lane
                    .iter()
                    .map(|lane| lane.iter().map(vec3).collect())
                    .collect(),
            })
            .collect(),
        lane_lines: drive
            .lane_lines
            .iter()
            .map(|l| {
                lane_line_record(&l.spline, drive.drive_id as i64, Some(&l.control_point_steps))
            })
            .collect(),
        signs: drive
            .signs
            .iter()
            .map(|s| SignRecord {
                sign_id: s.sign_id,
                step: s.step,
                position: vec3(&s.position),
                vehicle_frame: vec3(&s.vehicle_frame),
                covariance: upper_triangle(&s.covariance),
            })
            .collect(),
        gnss_fixes: drive
            .gnss_fixes
            .iter()
            .map(|g| GnssRecord {
                step: g.step,
                position: vec3(&g.position),
            })
            .collect(),
        odometry: drive
            .odometry
            .iter()
            .map(|o| {
                let (rotation, translation) = pose_fields(&o.relative);
                OdometryRecord {
                    from_step: o.from_step,
                    to_step: o.to_step,
                    rotation,
                    translation,
                }
            })
            .collect(),
        gnss_sigma: drive.gnss_sigma,
        odometry_sigma: drive.odometry_sigma,
        odometry_rot_sigma: drive.odometry_rot_sigma,
        detection_sigma: drive.detection_sigma,
        poisson_rate: drive.poisson_rate,
    }
}

/// Rebuilds a [`DriveMap`] from its exchange record.
pub fn drive_from_record(record: &DriveRecord) -> Result<DriveMap> {
    Ok(DriveMap {
        drive_id: record.drive_id,
        poses: record
            .poses
            .iter()
            .map(|p| (p.step, pose_from_fields(&p.rotation, &p.translation)))
            .collect(),
        scans: record
            .scans
            .iter()
            .map(|s| crate::sim::ScanRecord {
                step: s.step,
                per_lane: s
                    .per_lane
                    .iter()
                    .map(|lane| {
                        lane.iter().map(|p| Vector3::from_column_slice(p)).collect()
                    })
                    .collect(),
            })
            .collect(),
        lane_lines: record
            .lane_lines
            .iter()
            .map(|l| {
                let spline = lane_line_from_record(l)?;
                let control_point_steps = l
                    .control_point_steps
                    .clone()
                    .unwrap_or_else(|| vec![spline.birth_time; spline.len()]);
                Ok(DriveLaneLine {
                    spline,
                    control_point_steps,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        signs: record
            .signs
            .iter()
            .map(|s| SignObservationRecord {
                sign_id: s.sign_id,
                step: s.step,
                position: Vector3::from_column_slice(&s.position),
                vehicle_frame: Vector3::from_column_slice(&s.vehicle_frame),
                covariance: from_upper_triangle(&s.covariance),
            })
            .collect(),
        gnss_fixes: record
            .gnss_fixes
            .iter()
            .map(|g| GnssFix {
                step: g.step,
                position: Vector3::from_column_slice(&g.position),
            })
            .collect(),
        odometry: record
            .odometry
            .iter()
            .map(|o| OdometryMeasurement {
                from_step: o.from_step,
                to_step: o.to_step,
                relative: pose_from_fields(&o.rotation, &o.translation),
            })
            .collect(),
        gnss_sigma: record.gnss_sigma,
        odometry_sigma: record.odometry_sigma,
        odometry_rot_sigma: record.odometry_rot_sigma,
        detection_sigma: record.detection_sigma,
        poisson_rate: record.poisson_rate,
    })
}

impl MapExchangeFile {
    pub fn ground_truth(gt: GroundTruthMap, metadata: MapFileMetadata) -> Self {
        Self {
            version: MAP_FILE_VERSION,
            kind: MapFileKind::GroundTruth,
            metadata,
            ground_truth: Some(gt),
            drives: Vec::new(),
            lane_lines: Vec::new(),
        }
    }

    pub fn drive_set(drives: &[DriveMap], metadata: MapFileMetadata) -> Self {
        Self {
            version: MAP_FILE_VERSION,
            kind: MapFileKind::DriveSet,
            metadata,
            ground_truth: None,
            drives: drives.iter().map(drive_record).collect(),
            lane_lines: Vec::new(),
        }
    }

    pub fn fused_map(
        lanes: &[(BsplineTrajectory, i64)],
        metadata: MapFileMetadata,
    ) -> Self {
        Self {
            version: MAP_FILE_VERSION,
            kind: MapFileKind::FusedMap,
            metadata,
            ground_truth: None,
            drives: Vec::new(),
            lane_lines: lanes
                .iter()
                .map(|(traj, drive_id)| lane_line_record(traj, *drive_id, None))
                .collect(),
        }
    }

    /// Structural validation beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        if self.version != MAP_FILE_VERSION {
            return Err(Error::MapFile(format!(
                "unsupported version {} (expected {MAP_FILE_VERSION})",
                self.version
            )));
        }
        let consistent = match self.kind {
            MapFileKind::GroundTruth => self.ground_truth.is_some(),
            MapFileKind::DriveSet => !self.drives.is_empty(),
            MapFileKind::FusedMap => !self.lane_lines.is_empty(),
        };
        if !consistent {
            return Err(Error::MapFile(format!(
                "kind {:?} does not match the populated sections",
                self.kind
            )));
        }
        for record in self
            .lane_lines
            .iter()
            .chain(self.drives.iter().flat_map(|d| d.lane_lines.iter()))
        {
            if record.control_points.len() < 3 {
                return Err(Error::MapFile(
                    "lane line with fewer than three control points".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Writes a map file as pretty-printed JSON with a trailing newline.
pub fn save_map_file(path: &Path, file: &MapExchangeFile) -> Result<()> {
    file.validate()?;
    let mut text = serde_json::to_string_pretty(file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_map_file(path: &Path) -> Result<MapExchangeFile> {
    let text = fs::read_to_string(path)?;
    let file: MapExchangeFile = serde_json::from_str(&text)?;
    file.validate()?;
    Ok(file)
}

/// Parses a scenario spec from TOML.
pub fn parse_scenario_toml(text: &str) -> Result<ScenarioSpec> {
    toml::from_str(text).map_err(|e| Error::InvalidScenario(e.to_string()))
}

/// Renders a map file as a GeoJSON `FeatureCollection`.
///
/// Coordinates are meters east/north of the local origin recorded in the
/// collection's `origin` member; lane lines become `LineString` features with
/// per-vertex standard deviations, signs and ground-truth lanes are exported
/// as plain geometry.
pub fn to_geojson(file: &MapExchangeFile, samples_per_segment: usize) -> Result<String> {
    file.validate()?;
    let mut features = Vec::new();

    let mut push_lane = |record: &LaneLineRecord| -> Result<()> {
        let traj = lane_line_from_record(record)?;
        let m = samples_per_segment.max(2);
        let pts = traj.sample_polyline(m);
        let coords: Vec<_> = pts
            .iter()
            .map(|p| json!([p.position_mean.x, p.position_mean.y, p.position_mean.z]))
            .collect();
        let stddev: Vec<_> = pts
            .iter()
            .map(|p| {
                let t = p.position_covariance.trace();
                json!((t / 3.0).max(0.0).sqrt())
            })
            .collect();
        features.push(json!({
            "type": "Feature",
            "geometry": { "type": "LineString", "coordinates": coords },
            "properties": {
                "kind": "lane_line",
                "drive_id": record.drive_id,
                "stddev_m": stddev,
            },
        }));
        Ok(())
    };

    for record in &file.lane_lines {
        push_lane(record)?;
    }
    for drive in &file.drives {
        for record in &drive.lane_lines {
            push_lane(record)?;
        }
    }
    if let Some(gt) = &file.ground_truth {
        for lane in &gt.lane_lines {
            let coords: Vec<_> = lane.points.iter().map(|p| json!([p.x, p.y, p.z])).collect();
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "LineString", "coordinates": coords },
                "properties": { "kind": "ground_truth_lane" },
            }));
        }
        for sign in &gt.signs {
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "Point",
                              "coordinates": [sign.position.x, sign.position.y, sign.position.z] },
                "properties": { "kind": "sign", "id": sign.id },
            }));
        }
    }
    for drive in &file.drives {
        for sign in &drive.signs {
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "Point",
                              "coordinates": [sign.position[0], sign.position[1], sign.position[2]] },
                "properties": { "kind": "sign_observation", "id": sign.sign_id,
                                "drive_id": drive.drive_id },
            }));
        }
    }

    let collection = json!({
        "type": "FeatureCollection",
        "origin": {
            "description": "coordinates are meters east/north/up of this WGS84 anchor",
            "latitude": 0.0,
            "longitude": 0.0,
        },
        "features": features,
    });
    let mut text = serde_json::to_string_pretty(&collection)?;
    text.push('\n');
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_scenario, simulate_drive, ScenarioTemplate};

    fn sample_spec() -> ScenarioSpec {
        ScenarioSpec {
            template: ScenarioTemplate::Straight,
            length: 150.0,
            drives: 1,
            seed: 3,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn drive_set_round_trips_bit_exact() {
        let spec = sample_spec();
        let gt = build_scenario(&spec).unwrap();
        let mut drive = simulate_drive(&gt, &spec, 0).unwrap();
        drive.lane_lines = crate::sim::estimate_lanes(&drive);
        let file = MapExchangeFile::drive_set(
            std::slice::from_ref(&drive),
            MapFileMetadata {
                seed: Some(spec.seed),
                scenario: Some(spec.template.as_str().into()),
                comment: None,
            },
        );
        let dir = std::env::temp_dir().join("lanefuse-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("drives.json");
        save_map_file(&path, &file).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_map_file(&path).unwrap();
        save_map_file(&path, &loaded).unwrap();
        let second = std::fs::read(&path).unwrap();
        if first != second {
            let i = first
                .iter()
                .zip(second.iter())
                .position(|(a, b)| a != b)
                .unwrap_or(first.len().min(second.len()));
            let lo = i.saturating_sub(60);
            panic!(
                "round trip differs at byte {i}:\n first: {}\nsecond: {}",
                String::from_utf8_lossy(&first[lo..(i + 60).min(first.len())]),
                String::from_utf8_lossy(&second[lo..(i + 60).min(second.len())]),
            );
        }

        // The rebuilt drive matches the original up to quaternion
        // renormalization and covariance regularization (last-ulp effects).
        let rebuilt = drive_from_record(&loaded.drives[0]).unwrap();
        assert_eq!(rebuilt.poses.len(), drive.poses.len());
        assert_eq!(rebuilt.lane_lines.len(), drive.lane_lines.len());
        assert_eq!(rebuilt.signs.len(), drive.signs.len());
        assert_eq!(rebuilt.odometry.len(), drive.odometry.len());
        for ((_, a), (_, b)) in drive.poses.iter().zip(rebuilt.poses.iter()) {
            assert_eq!(a.translation, b.translation);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-14);
        }
        for (a, b) in drive.lane_lines.iter().zip(rebuilt.lane_lines.iter()) {
            assert_eq!(a.control_point_steps, b.control_point_steps);
            for (ca, cb) in a
                .spline
                .control_points()
                .iter()
                .zip(b.spline.control_points().iter())
            {
                assert_eq!(ca.mean, cb.mean);
                assert!((ca.covariance() - cb.covariance()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_upper_triangle_round_trips() {
        let m = Matrix3::new(4.0, 0.5, 0.1, 0.5, 3.0, -0.2, 0.1, -0.2, 2.0);
        assert_eq!(from_upper_triangle(&upper_triangle(&m)), m);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut file = MapExchangeFile::ground_truth(
            build_scenario(&sample_spec()).unwrap(),
            MapFileMetadata::default(),
        );
        file.version = 99;
        assert!(matches!(file.validate(), Err(Error::MapFile(_))));
    }

    #[test]
    fn kind_section_mismatch_is_rejected() {
        let file = MapExchangeFile {
            version: MAP_FILE_VERSION,
            kind: MapFileKind::FusedMap,
            metadata: MapFileMetadata::default(),
            ground_truth: None,
            drives: Vec::new(),
            lane_lines: Vec::new(),
        };
        assert!(file.validate().is_err());
    }

    #[test]
    fn scenario_toml_parses_with_defaults() {
        let spec = parse_scenario_toml(
            "template = \"split_merge\"\nlength = 400.0\ndrives = 8\nseed = 42\n",
        )
        .unwrap();
        assert_eq!(spec.template, ScenarioTemplate::SplitMerge);
        assert_eq!(spec.drives, 8);
        assert_eq!(spec.gnss_sigma, 1.0); // default preserved
        assert!(parse_scenario_toml("template = \"bogus\"").is_err());
    }

    #[test]
    fn geojson_contains_lane_and_sign_features() {
        let spec = sample_spec();
        let gt = build_scenario(&spec).unwrap();
        let file = MapExchangeFile::ground_truth(gt, MapFileMetadata::default());
        let text = to_geojson(&file, 4).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["type"], "FeatureCollection");
        let features = parsed["features"].as_array().unwrap();
        assert!(features
            .iter()
            .any(|f| f["properties"]["kind"] == "ground_truth_lane"));
        assert!(features.iter().any(|f| f["properties"]["kind"] == "sign"));
        assert!(parsed["origin"]["latitude"].is_number());
    }

    #[test]
    fn fused_map_geojson_reports_stddev_per_vertex() {
        let cps = (0..4)
            .map(|i| {
                GaussianControlPoint::isotropic(Vector3::new(i as f64 * 10.0, 0.0, 0.0), 0.25)
            })
            .collect();
        let traj = BsplineTrajectory::new(0, cps).unwrap();
        let file = MapExchangeFile::fused_map(&[(traj, -1)], MapFileMetadata::default());
        let text = to_geojson(&file, 5).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        let lane = &parsed["features"][0];
        let coords = lane["geometry"]["coordinates"].as_array().unwrap();
        let stddev = lane["properties"]["stddev_m"].as_array().unwrap();
        assert_eq!(coords.len(), stddev.len());
        assert!(stddev.iter().all(|s| s.as_f64().unwrap() > 0.0));
    }
}
