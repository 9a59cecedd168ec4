//! Multi-drive lane-level map fusion: positioning-uncertainty estimation,
//! covariance inflation, spatial clustering, and greedy pairwise fusion.

use std::collections::HashMap;
use std::collections::HashSet;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fusion::{detect_overlap, fuse_pair, FusionParams, OverlapCase};
use crate::spline::BsplineTrajectory;

/// A set of lane-line trajectories, each tagged with the drive it came from.
#[derive(Debug, Clone, Default)]
pub struct LaneLineSet {
    pub trajectories: Vec<BsplineTrajectory>,
    pub drive_ids: Vec<i64>,
}

impl LaneLineSet {
    pub fn push(&mut self, trajectory: BsplineTrajectory, drive_id: i64) {
        self.trajectories.push(trajectory);
        self.drive_ids.push(drive_id);
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Relative positioning error of one drive's observation of a map element.
#[derive(Debug, Clone)]
pub struct RelativeErrorEstimate {
    pub element_id: usize,
    pub drive_id: i64,
    pub error: Vector3<f64>,
    pub magnitude: f64,
}

/// Implicit (consensus) element computed from several drives' observations.
#[derive(Debug, Clone)]
pub enum ImplicitElement {
    /// Total-least-squares line: centroid plus unit direction.
    Line {
        point: Vector3<f64>,
        direction: Vector3<f64>,
    },
    /// Centroid of point observations (traffic signs).
    Point(Vector3<f64>),
}

/// Kind of map element for implicit-element estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    LaneLine,
    TrafficSign,
}

/// Computes the implicit element from at least two observations of the same
/// element: the TLS line through the pooled points for lane lines, the
/// centroid for signs.
pub fn implicit_element(
    observations: &[Vec<Vector3<f64>>],
    kind: ElementKind,
) -> Result<ImplicitElement> {
    if observations.len() < 2 {
        return Err(Error::InsufficientObservations(observations.len()));
    }
    let all: Vec<&Vector3<f64>> = observations.iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::InsufficientObservations(0));
    }
    let centroid = all.iter().fold(Vector3::zeros(), |acc, p| acc + **p) / all.len() as f64;
    match kind {
        ElementKind::TrafficSign => Ok(ImplicitElement::Point(centroid)),
        ElementKind::LaneLine => {
            let mut scatter = nalgebra::Matrix3::<f64>::zeros();
            for p in &all {
                let d = **p - centroid;
                scatter += d * d.transpose();
            }
            let eig = scatter.symmetric_eigen();
            // Dominant eigenvector of the scatter matrix = dominant right
            // singular vector of the centered sample matrix.
            let mut best = 0;
            for i in 1..3 {
                if eig.eigenvalues[i] > eig.eigenvalues[best] {
                    best = i;
                }
            }
            let direction = eig.eigenvectors.column(best).into_owned().normalize();
            Ok(ImplicitElement::Line {
                point: centroid,
                direction,
            })
        }
    }
}

/// Relative error of one observation against the implicit element: the mean
/// point-to-line displacement for lane lines, the point difference for signs.
pub fn relative_error(
    observation: &[Vector3<f64>],
    implicit: &ImplicitElement,
    element_id: usize,
    drive_id: i64,
) -> RelativeErrorEstimate {
    let error = match implicit {
        ImplicitElement::Point(p) => {
            let centroid = observation.iter().sum::<Vector3<f64>>() / observation.len().max(1) as f64;
            centroid - p
        }
        ImplicitElement::Line { point, direction } => {
            let mut sum = Vector3::zeros();
            for obs in observation {
                let d = obs - point;
                let along = d.dot(direction);
                sum += d - along * *direction;
            }
            sum / observation.len().max(1) as f64
        }
    };
    RelativeErrorEstimate {
        element_id,
        drive_id,
        magnitude: error.norm(),
        error,
    }
}

/// Floor for the covariance scale factor; a zero relative error still leaves
/// intrinsic mapping uncertainty.
pub const INFLATION_FLOOR: f64 = 0.25;

/// Scales every control-point covariance by `max(magnitude, floor)`; means
/// are untouched.
pub fn inflate_covariances(traj: &BsplineTrajectory, magnitude: f64) -> BsplineTrajectory {
    let factor = magnitude.max(INFLATION_FLOOR);
    let mut out = traj.clone();
    for cp in out.control_points_mut() {
        *cp = cp.scale_covariance(factor);
    }
    out
}

/// Partition of trajectory indices into connected components: two
/// trajectories connect iff any pair of their interpolated points lies within
/// `cluster_radius`. Uses a spatial hash over interpolated samples.
pub fn group_by_clusters(lanes: &LaneLineSet, cluster_radius: f64) -> Vec<Vec<usize>> {
    assert!(cluster_radius > 0.0);
    let n = lanes.trajectories.len();
    if n == 0 {
        return Vec::new();
    }
    let samples: Vec<Vec<Vector3<f64>>> = lanes
        .trajectories
        .iter()
        .map(|t| t.sample_means(10))
        .collect();

    let cell = cluster_radius;
    let key = |p: &Vector3<f64>| {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<(usize, usize)>> = HashMap::new();
    for (ti, pts) in samples.iter().enumerate() {
        for (pi, p) in pts.iter().enumerate() {
            grid.entry(key(p)).or_default().push((ti, pi));
        }
    }

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = cluster_radius * cluster_radius;
    for (ti, pts) in samples.iter().enumerate() {
        for p in pts {
            let (kx, ky, kz) = key(p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(kx + dx, ky + dy, kz + dz)) else {
                            continue;
                        };
                        for &(tj, pj) in bucket {
                            if tj == ti {
                                continue;
                            }
                            if (samples[tj][pj] - p).norm_squared() <= r2 {
                                let a = find(&mut parent, ti);
                                let b = find(&mut parent, tj);
                                if a != b {
                                    parent[a.max(b)] = a.min(b);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Parameters of multi-lane fusion.
#[derive(Debug, Clone, Copy)]
pub struct MapFusionParams {
    pub fusion: FusionParams,
    pub cluster_radius: f64,
}

impl Default for MapFusionParams {
    fn default() -> Self {
        Self {
            fusion: FusionParams::default(),
            cluster_radius: 1.0,
        }
    }
}

/// Greedy fusion of an arbitrary trajectory set, cluster group by cluster
/// group. Within a group the work list is scanned in input order for a
/// fusable pair; the pair is replaced by the fusion outputs (truncation may
/// extend the list) until no pair remains fusable.
pub fn greedy_fuse(lanes: &LaneLineSet, params: &MapFusionParams) -> LaneLineSet {
    let groups = group_by_clusters(lanes, params.cluster_radius);
    let mut out = LaneLineSet::default();
    for group in groups {
        let work: Vec<(BsplineTrajectory, i64)> = group
            .iter()
            .map(|&i| (lanes.trajectories[i].clone(), lanes.drive_ids[i]))
            .collect();
        for (traj, drive) in fuse_group(work, params) {
            out.push(traj, drive);
        }
    }
    out
}

fn fuse_group(
    work: Vec<(BsplineTrajectory, i64)>,
    params: &MapFusionParams,
) -> Vec<(BsplineTrajectory, i64)> {
    // Stable ids so attempted pairs are never retried; fusion outputs get
    // fresh ids and may fuse again. Only pairs that duplicate the same lane
    // line are fused: full containments always qualify, while partial
    // overlaps must cover at least half of one trajectory's grid. Two
    // distinct lines that merely touch — a branch meeting a through lane, or
    // the remaining sides of an earlier truncation — produce small coverage
    // and stay separate; splicing them would fabricate geometry that no
    // single lane line has.
    const MIN_PARTIAL_COVERAGE: f64 = 0.5;
    let mut next_id: u64 = 0;
    let mut list: Vec<(u64, BsplineTrajectory, i64)> = work
        .into_iter()
        .map(|(t, d)| {
            let id = next_id;
            next_id += 1;
            (id, t, d)
        })
        .collect();
    let mut banned: HashSet<(u64, u64)> = HashSet::new();
    let budget = 50 * list.len().max(1);

    for _ in 0..budget {
        let mut fused_any = false;
        'scan: for i in 0..list.len() {
            for j in (i + 1)..list.len() {
                let key = (list[i].0.min(list[j].0), list[i].0.max(list[j].0));
                if banned.contains(&key) {
                    continue;
                }
                let report = detect_overlap(
                    &list[i].1,
                    &list[j].1,
                    params.fusion.gamma,
                    params.fusion.tau_min,
                    params.fusion.grid_per_segment,
                );
                let fusable = match report.case_label {
                    OverlapCase::None => false,
                    // Full containment is always a redundant duplicate.
                    OverlapCase::Complete | OverlapCase::Case1 => true,
                    _ => {
                        let reverse = detect_overlap(
                            &list[j].1,
                            &list[i].1,
                            params.fusion.gamma,
                            params.fusion.tau_min,
                            params.fusion.grid_per_segment,
                        );
                        report.coverage.max(reverse.coverage) >= MIN_PARTIAL_COVERAGE
                    }
                };
                if !fusable {
                    banned.insert(key);
                    continue;
                }
                let result = fuse_pair(&list[i].1, &list[j].1, &params.fusion);
                let drive_main = list[i].2;
                let drive_src = list[j].2;
                banned.insert(key);
                list.remove(j);
                list.remove(i);
                for (k, traj) in result.merged.into_iter().enumerate() {
                    let id = next_id;
                    next_id += 1;
                    let drive = if k == 0 { drive_main } else { drive_src };
                    list.push((id, traj, drive));
                }
                fused_any = true;
                break 'scan;
            }
        }
        if !fused_any {
            break;
        }
    }

    list.into_iter().map(|(_, t, d)| (t, d)).collect()
}
