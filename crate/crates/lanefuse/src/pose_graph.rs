//! Multi-drive factor-graph optimization.
//!
//! Drives are chains of SE(3) poses tied together by odometry, anchored in
//! the global frame by GNSS fixes, and tied to each other by lane-registration
//! loop closures and shared traffic-sign landmarks. The total
//! squared-Mahalanobis cost is minimized with Levenberg-Marquardt.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::se3::PoseSe3;
use crate::sim::DriveMap;

/// Key of a pose vertex: (drive, time step).
pub type PoseKey = (u32, u32);

/// A constraint in the factor graph.
#[derive(Debug, Clone)]
pub enum Factor {
    /// Relative pose between consecutive steps of one drive.
    Odometry {
        drive: u32,
        from_step: u32,
        to_step: u32,
        measurement: PoseSe3,
        information: Matrix6<f64>,
    },
    /// Absolute position fix for one pose.
    Gnss {
        drive: u32,
        step: u32,
        position: Vector3<f64>,
        information: Matrix3<f64>,
    },
    /// Relative pose between two drives' submap-center poses, from lane
    /// registration.
    LoopClosure {
        drive_a: u32,
        step_a: u32,
        drive_b: u32,
        step_b: u32,
        measurement: PoseSe3,
        information: Matrix6<f64>,
    },
    /// A traffic-sign landmark observed from one pose, in the vehicle frame.
    SignObservation {
        drive: u32,
        step: u32,
        sign_id: u32,
        measurement: Vector3<f64>,
        information: Matrix3<f64>,
    },
}

/// All optimization variables: vehicle poses and sign landmark positions.
#[derive(Debug, Clone, Default)]
pub struct GraphState {
    pub poses: BTreeMap<PoseKey, PoseSe3>,
    pub sign_landmarks: BTreeMap<u32, Vector3<f64>>,
}

/// Residual of one factor at a given state; zero when the state matches the
/// measurement exactly.
pub fn residual(factor: &Factor, state: &GraphState) -> Result<DVector<f64>> {
    let pose = |drive: u32, step: u32| -> Result<&PoseSe3> {
        state
            .poses
            .get(&(drive, step))
            .ok_or_else(|| Error::MissingEndpoint(format!("pose ({drive}, {step})")))
    };
    match factor {
        Factor::Odometry {
            drive,
            from_step,
            to_step,
            measurement,
            ..
        } => {
            let a = pose(*drive, *from_step)?;
            let b = pose(*drive, *to_step)?;
            let err = measurement.inverse().compose(&a.between(b));
            Ok(DVector::from_column_slice(err.log().as_slice()))
        }
        Factor::LoopClosure {
            drive_a,
            step_a,
            drive_b,
            step_b,
            measurement,
            ..
        } => {
            let a = pose(*drive_a, *step_a)?;
            let b = pose(*drive_b, *step_b)?;
            let err = measurement.inverse().compose(&a.between(b));
            Ok(DVector::from_column_slice(err.log().as_slice()))
        }
        Factor::Gnss {
            drive,
            step,
            position,
            ..
        } => {
            let p = pose(*drive, *step)?;
            Ok(DVector::from_column_slice((p.translation - position).as_slice()))
        }
        Factor::SignObservation {
            drive,
            step,
            sign_id,
            measurement,
            ..
        } => {
            let p = pose(*drive, *step)?;
            let landmark = state
                .sign_landmarks
                .get(sign_id)
                .ok_or_else(|| Error::MissingEndpoint(format!("sign {sign_id}")))?;
            let predicted = p.inverse().transform_point(landmark);
            Ok(DVector::from_column_slice((predicted - measurement).as_slice()))
        }
    }
}

/// Optimizer configuration.
#[derive(Debug, Clone)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    /// Relative cost decrease below which iteration stops.
    pub cost_tolerance: f64,
    /// Huber kernel width in meters/radians, applied to the loop-closure
    /// residual norm (IRLS downweighting of outlier registrations).
    pub huber_delta: f64,
    /// Poses held constant (gauge fixing when no GNSS factors are present).
    pub frozen_poses: Vec<PoseKey>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            cost_tolerance: 1e-8,
            huber_delta: 1.0,
            frozen_poses: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum VarKey {
    Pose(PoseKey),
    Sign(u32),
}

struct Indexer {
    offsets: HashMap<VarKey, usize>,
    dims: HashMap<VarKey, usize>,
    total: usize,
}

fn build_index(state: &GraphState, frozen: &[PoseKey]) -> Indexer {
    let mut offsets = HashMap::new();
    let mut dims = HashMap::new();
    let mut total = 0;
    for key in state.poses.keys() {
        if frozen.contains(key) {
            continue;
        }
        offsets.insert(VarKey::Pose(*key), total);
        dims.insert(VarKey::Pose(*key), 6);
        total += 6;
    }
    for id in state.sign_landmarks.keys() {
        offsets.insert(VarKey::Sign(*id), total);
        dims.insert(VarKey::Sign(*id), 3);
        total += 3;
    }
    Indexer {
        offsets,
        dims,
        total,
    }
}

fn factor_vars(factor: &Factor) -> Vec<VarKey> {
    match factor {
        Factor::Odometry {
            drive,
            from_step,
            to_step,
            ..
        } => vec![
            VarKey::Pose((*drive, *from_step)),
            VarKey::Pose((*drive, *to_step)),
        ],
        Factor::LoopClosure {
            drive_a,
            step_a,
            drive_b,
            step_b,
            ..
        } => vec![
            VarKey::Pose((*drive_a, *step_a)),
            VarKey::Pose((*drive_b, *step_b)),
        ],
        Factor::Gnss { drive, step, .. } => vec![VarKey::Pose((*drive, *step))],
        Factor::SignObservation {
            drive,
            step,
            sign_id,
            ..
        } => vec![VarKey::Pose((*drive, *step)), VarKey::Sign(*sign_id)],
    }
}

fn information_of(factor: &Factor) -> DMatrix<f64> {
    match factor {
        Factor::Odometry { information, .. } | Factor::LoopClosure { information, .. } => {
            DMatrix::from_iterator(6, 6, information.iter().cloned())
        }
        Factor::Gnss { information, .. } | Factor::SignObservation { information, .. } => {
            DMatrix::from_iterator(3, 3, information.iter().cloned())
        }
    }
}

fn perturb_state(state: &GraphState, var: VarKey, delta: &DVector<f64>) -> GraphState {
    let mut out = state.clone();
    match var {
        VarKey::Pose(key) => {
            let pose = out.poses.get_mut(&key).expect("indexed pose exists");
            let d = Vector6::from_column_slice(delta.as_slice());
            *pose = pose.retract(&d);
        }
        VarKey::Sign(id) => {
            let p = out.sign_landmarks.get_mut(&id).expect("indexed sign exists");
            *p += Vector3::from_column_slice(delta.as_slice());
        }
    }
    out
}

/// Huber weight on the residual norm; 1 inside the kernel.
fn huber_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

fn factor_cost(factor: &Factor, state: &GraphState, config: &OptimizeConfig) -> Result<f64> {
    let r = residual(factor, state)?;
    let omega = information_of(factor);
    let sq = (r.transpose() * &omega * &r)[(0, 0)];
    if matches!(factor, Factor::LoopClosure { .. }) {
        return Ok(huber_weight(r.norm(), config.huber_delta) * sq);
    }
    Ok(sq)
}

fn total_cost(factors: &[Factor], state: &GraphState, config: &OptimizeConfig) -> Result<f64> {
    factors.iter().map(|f| factor_cost(f, state, config)).sum()
}

/// Minimizes the total squared-Mahalanobis cost with Levenberg-Marquardt.
///
/// Accepted steps never increase the cost; iteration stops when the relative
/// cost decrease falls below the tolerance or the iteration budget runs out.
pub fn optimize(
    state: &GraphState,
    factors: &[Factor],
    config: &OptimizeConfig,
) -> Result<GraphState> {
    // Structural validation up front.
    for factor in factors {
        residual(factor, state)?;
    }
    let index = build_index(state, &config.frozen_poses);
    if index.total == 0 {
        return Ok(state.clone());
    }

    let mut current = state.clone();
    let mut cost = total_cost(factors, &current, config)?;
    let mut lambda = 1e-6;

    for _ in 0..config.max_iterations {
        let (hessian, gradient) = build_normal_equations(factors, &current, &index, config)?;

        let mut accepted = false;
        for _ in 0..12 {
            match solve_damped(&hessian, &gradient, lambda, index.total) {
                Some(delta) => {
                    let candidate = apply_step(&current, &index, &delta);
                    let new_cost = total_cost(factors, &candidate, config)?;
                    if new_cost <= cost {
                        let rel = (cost - new_cost) / cost.max(1e-300);
                        current = candidate;
                        cost = new_cost;
                        lambda = (lambda / 3.0).max(1e-12);
                        accepted = true;
                        if rel < config.cost_tolerance {
                            return Ok(current);
                        }
                        break;
                    }
                    lambda *= 10.0;
                }
                None => lambda *= 10.0,
            }
        }
        if !accepted {
            // Damping exhausted: the current state is a (local) optimum.
            return Ok(current);
        }
    }
    Ok(current)
}

// BTreeMap keeps assembly order deterministic so optimization results are
// byte-for-byte reproducible across runs.
type BlockMap = BTreeMap<(usize, usize), DMatrix<f64>>;

fn build_normal_equations(
    factors: &[Factor],
    state: &GraphState,
    index: &Indexer,
    config: &OptimizeConfig,
) -> Result<(BlockMap, DVector<f64>)> {
    let mut hessian: BlockMap = BTreeMap::new();
    let mut gradient = DVector::zeros(index.total);
    const H: f64 = 1e-6;

    for factor in factors {
        let r = residual(factor, state)?;
        let mut omega = information_of(factor);
        if matches!(factor, Factor::LoopClosure { .. }) {
            omega *= huber_weight(r.norm(), config.huber_delta);
        }

        let vars: Vec<(VarKey, usize, usize)> = factor_vars(factor)
            .into_iter()
            .filter_map(|v| {
                index
                    .offsets
                    .get(&v)
                    .map(|&off| (v, off, *index.dims.get(&v).expect("dim recorded")))
            })
            .collect();
        if vars.is_empty() {
            continue;
        }

        // Central-difference Jacobian per involved variable block.
        let mut jacobians = Vec::with_capacity(vars.len());
        for (var, _, dim) in &vars {
            let mut j = DMatrix::zeros(r.len(), *dim);
            for c in 0..*dim {
                let mut dv = DVector::zeros(*dim);
                dv[c] = H;
                let plus = residual(factor, &perturb_state(state, *var, &dv))?;
                dv[c] = -H;
                let minus = residual(factor, &perturb_state(state, *var, &dv))?;
                for row in 0..r.len() {
                    j[(row, c)] = (plus[row] - minus[row]) / (2.0 * H);
                }
            }
            jacobians.push(j);
        }

        for (ai, (_, a_off, a_dim)) in vars.iter().enumerate() {
            let jt_omega = jacobians[ai].transpose() * &omega;
            let g_block = &jt_omega * &r;
            for c in 0..*a_dim {
                gradient[a_off + c] += g_block[c];
            }
            for (bi, (_, b_off, _)) in vars.iter().enumerate() {
                if b_off < a_off {
                    continue; // upper triangle only, mirrored at assembly
                }
                let block = &jt_omega * &jacobians[bi];
                hessian
                    .entry((*a_off, *b_off))
                    .and_modify(|m| *m += &block)
                    .or_insert(block);
            }
        }
    }
    Ok((hessian, gradient))
}

fn solve_damped(
    hessian: &BlockMap,
    gradient: &DVector<f64>,
    lambda: f64,
    total: usize,
) -> Option<DVector<f64>> {
    let mut coo = CooMatrix::new(total, total);
    for (&(a_off, b_off), block) in hessian {
        for r in 0..block.nrows() {
            for c in 0..block.ncols() {
                let v = block[(r, c)];
                if v == 0.0 {
                    continue;
                }
                let (gr, gc) = (a_off + r, b_off + c);
                coo.push(gr, gc, v);
                // Off-diagonal blocks are stored once; mirror them here.
                // Diagonal blocks already contain both triangles.
                if a_off != b_off {
                    coo.push(gc, gr, v);
                }
            }
        }
    }
    for i in 0..total {
        coo.push(i, i, lambda.max(1e-12));
    }
    let csc = CscMatrix::from(&coo);
    let chol = nalgebra_sparse::factorization::CscCholesky::factor(&csc).ok()?;
    let rhs = DMatrix::from_column_slice(total, 1, (-gradient).as_slice());
    let sol = chol.solve(&rhs);
    let delta = DVector::from_column_slice(sol.as_slice());
    delta.iter().all(|v| v.is_finite()).then_some(delta)
}

fn apply_step(state: &GraphState, index: &Indexer, delta: &DVector<f64>) -> GraphState {
    let mut out = state.clone();
    for (var, &off) in &index.offsets {
        match var {
            VarKey::Pose(key) => {
                let d = Vector6::from_column_slice(&delta.as_slice()[off..off + 6]);
                let pose = out.poses.get_mut(key).expect("indexed pose exists");
                *pose = pose.retract(&d);
            }
            VarKey::Sign(id) => {
                let d = Vector3::from_column_slice(&delta.as_slice()[off..off + 3]);
                let p = out.sign_landmarks.get_mut(id).expect("indexed sign exists");
                *p += d;
            }
        }
    }
    out
}

/// Semantic class of a registration point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointClass {
    LaneMarking,
    Sign,
}

/// A point sampled from a submap for registration.
#[derive(Debug, Clone, Copy)]
pub struct LabeledPoint {
    pub position: Vector3<f64>,
    pub class: PointClass,
}

const ICP_MAX_ITERATIONS: usize = 50;
const ICP_CORRESPONDENCE_GATE: f64 = 3.0;
const ICP_MIN_POINTS: usize = 20;
const ICP_MAX_MEAN_RESIDUAL: f64 = 1.0;

/// Class-gated point-to-line ICP between two labeled submaps.
///
/// Finds the rigid transform `T` minimizing point-to-line distances (lane
/// markings) and point-to-point distances (signs) from `T * b` to `a`.
/// Returns the transform and the Gauss-Newton approximate Hessian at
/// convergence as the loop-closure information.
pub fn register_lane_submaps(
    submap_a: &[LabeledPoint],
    submap_b: &[LabeledPoint],
    initial_guess: &PoseSe3,
) -> Result<(PoseSe3, Matrix6<f64>)> {
    if submap_a.len() < ICP_MIN_POINTS || submap_b.len() < ICP_MIN_POINTS {
        return Err(Error::RegistrationRejected(format!(
            "too few points ({} / {})",
            submap_a.len(),
            submap_b.len()
        )));
    }

    let mut transform = *initial_guess;
    let mut hessian = Matrix6::<f64>::zeros();
    let mut mean_residual = f64::INFINITY;
    let mut converged = false;

    for _ in 0..ICP_MAX_ITERATIONS {
        hessian = Matrix6::zeros();
        let mut rhs = Vector6::<f64>::zeros();
        let mut residual_sum = 0.0;
        let mut count = 0usize;

        for bp in submap_b {
            let q = transform.transform_point(&bp.position);
            // Nearest same-class neighbours in A.
            let mut nearest: Option<(f64, usize)> = None;
            let mut second: Option<(f64, usize)> = None;
            for (i, ap) in submap_a.iter().enumerate() {
                if ap.class != bp.class {
                    continue;
                }
                let d = (ap.position - q).norm();
                match nearest {
                    Some((dn, _)) if d >= dn => {
                        if second.map_or(true, |(ds, _)| d < ds) {
                            second = Some((d, i));
                        }
                    }
                    _ => {
                        second = nearest;
                        nearest = Some((d, i));
                    }
                }
            }
            let Some((dn, ni)) = nearest else { continue };
            if dn > ICP_CORRESPONDENCE_GATE {
                continue;
            }

            // residual = projection of (q - anchor); jacobian of q under a
            // left perturbation exp(delta) * T is [I, -skew(q)].
            let mut jq = nalgebra::SMatrix::<f64, 3, 6>::zeros();
            jq.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            let sk = Matrix3::new(0.0, -q.z, q.y, q.z, 0.0, -q.x, -q.y, q.x, 0.0);
            jq.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-sk));

            let (r, j): (Vector3<f64>, nalgebra::SMatrix<f64, 3, 6>) = match bp.class {
                PointClass::Sign => (q - submap_a[ni].position, jq),
                PointClass::LaneMarking => {
                    let anchor = submap_a[ni].position;
                    let dir = match second {
                        Some((_, si)) => {
                            let d = submap_a[si].position - anchor;
                            if d.norm() > 1e-9 {
                                d.normalize()
                            } else {
                                Vector3::x()
                            }
                        }
                        None => Vector3::x(),
                    };
                    let diff = q - anchor;
                    let perp = diff - diff.dot(&dir) * dir;
                    let proj = Matrix3::identity() - dir * dir.transpose();
                    (perp, proj * jq)
                }
            };

            hessian += j.transpose() * j;
            rhs -= j.transpose() * r;
            residual_sum += r.norm();
            count += 1;
        }

        if count == 0 {
            return Err(Error::RegistrationRejected("no correspondences".into()));
        }
        mean_residual = residual_sum / count as f64;

        // Trace-scaled ridge: parallel lane geometry can leave the
        // along-track direction nearly unobserved.
        let damped = hessian + Matrix6::identity() * (1e-6 * hessian.trace().max(1.0));
        let Some(chol) = damped.cholesky() else {
            return Err(Error::RegistrationRejected("degenerate normal equations".into()));
        };
        let delta = chol.solve(&rhs);
        transform = PoseSe3::exp(&delta).compose(&transform);
        if delta.norm() < 1e-10 {
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(Error::RegistrationRejected("no convergence in 50 iterations".into()));
    }
    if mean_residual > ICP_MAX_MEAN_RESIDUAL {
        return Err(Error::RegistrationRejected(format!(
            "mean residual {mean_residual:.3} m too large"
        )));
    }
    Ok((transform, hessian + Matrix6::identity() * 1e-6))
}

/// Rigid submaps: poses are grouped in blocks of `submap_size` consecutive
/// steps; the block's middle step is the submap center.
pub fn submap_center(step_index: usize, step_count: usize, submap_size: usize) -> usize {
    let submap = step_index / submap_size.max(1);
    let start = submap * submap_size;
    let end = ((submap + 1) * submap_size).min(step_count);
    start + (end - start) / 2
}

/// Applies per-submap pose corrections from the optimized state to a drive's
/// lane lines, signs, and poses. Each control point binds to the submap whose
/// center step is nearest to the control point's creation step.
pub fn transform_drive_map(
    drive: &DriveMap,
    optimized: &GraphState,
    submap_size: usize,
) -> DriveMap {
    let mut out = drive.clone();
    let steps: Vec<u32> = drive.poses.iter().map(|(k, _)| *k).collect();
    if steps.is_empty() {
        return out;
    }

    // Correction per step, applied rigidly per submap via the center step.
    let correction = |step: u32| -> PoseSe3 {
        let idx = steps
            .iter()
            .position(|&s| s >= step)
            .unwrap_or(steps.len() - 1);
        let center_idx = submap_center(idx, steps.len(), submap_size);
        let center_step = steps[center_idx];
        let estimated = drive
            .poses
            .iter()
            .find(|(k, _)| *k == center_step)
            .map(|(_, p)| *p)
            .expect("center step exists");
        match optimized.poses.get(&(drive.drive_id, center_step)) {
            Some(opt) => opt.compose(&estimated.inverse()),
            None => PoseSe3::identity(),
        }
    };

    for lane in &mut out.lane_lines {
        for (cp, &step) in lane
            .spline
            .control_points_mut()
            .iter_mut()
            .zip(lane.control_point_steps.iter())
        {
            let c = correction(step.max(0) as u32);
            let r = c.rotation_matrix();
            let cov = r * cp.covariance() * r.transpose();
            *cp = crate::spline::GaussianControlPoint::new(c.transform_point(&cp.mean), cov);
        }
    }
    for sign in &mut out.signs {
        let c = correction(sign.step);
        sign.position = c.transform_point(&sign.position);
    }
    for (step, pose) in &mut out.poses {
        if let Some(opt) = optimized.poses.get(&(drive.drive_id, *step)) {
            *pose = *opt;
        }
    }
    out
}
