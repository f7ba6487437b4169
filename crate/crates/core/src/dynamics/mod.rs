//! Descriptor-form planar multibody dynamics.
//!
//! Bodies carry three coordinates (x, z, rotation). Joints, motors and
//! contacts are constraint rows with Lagrange multipliers. One step assembles
//! the saddle system
//!
//! ```text
//! [ M  -G^T ] [ v+ ]   [ M v + dt f ]
//! [ G  Sigma] [ l  ] - [ r_lambda   ] = w_l - w_u
//! ```
//!
//! solves it as a mixed LCP, then integrates positions semi-implicitly with
//! `x+ = x + v+ dt`. Multipliers are solved as impulses and stored in the
//! state as forces and torques (divided by `dt`).

mod geometry;
mod math;

pub use geometry::{HalfPlane, ManifoldPoint, Shape};
pub use math::{Pose, Twist, Vec2};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lcp::{self, DirectOptions, FrictionLink, LcpError, MlcpProblem, PgsOptions};
use crate::scenario::WorldParams;
use geometry::Obb;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {0} in state")]
    NonFinite(&'static str),
    #[error("invalid time step {0}")]
    InvalidTimeStep(f64),
    #[error("control vector has {got} entries, system has {expected} motors")]
    ControlSize { expected: usize, got: usize },
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("solver failure at step {step}: {source}")]
    SolverFailure { step: usize, source: LcpError },
}

/// Either a dynamic body or the fixed world frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BodyRef {
    Ground,
    Body(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub name: String,
    pub mass: f64,
    pub inertia: f64,
    pub pose: Pose,
    pub velocity: Twist,
    pub shape: Option<Shape>,
    /// Constant applied force (x, z) and torque, on top of gravity.
    pub external_force: [f64; 3],
}

impl Body {
    pub fn new(name: impl Into<String>, mass: f64, inertia: f64, pose: Pose) -> Self {
        Self {
            name: name.into(),
            mass,
            inertia,
            pose,
            velocity: Twist::default(),
            shape: None,
            external_force: [0.0; 3],
        }
    }

    pub fn with_shape(mut self, shape: Shape) -> Self {
        self.shape = Some(shape);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Joint {
    /// Pins `anchor_a` on `a` to `anchor_b` on `b` (two rows).
    Hinge {
        a: BodyRef,
        b: BodyRef,
        anchor_a: Vec2,
        anchor_b: Vec2,
    },
    /// Lets `b` slide along `axis` (local to `a`) with the relative angle
    /// held at `ref_angle` (two rows). The joint coordinate is the offset
    /// of `anchor_b` from `anchor_a` along the axis.
    Prismatic {
        a: BodyRef,
        b: BodyRef,
        anchor_a: Vec2,
        anchor_b: Vec2,
        axis: Vec2,
        ref_angle: f64,
    },
    /// Holds `theta_b - theta_a = ref_angle` (one row).
    Lock { a: BodyRef, b: BodyRef, ref_angle: f64 },
}

/// Velocity-servo actuator on a hinge or prismatic joint.
///
/// The row is `J v + lambda / gain = target`, so the delivered effort is
/// `gain * (target - joint_velocity)` clipped at `±max_effort`.
#[derive(Debug, Clone, PartialEq)]
pub struct Motor {
    pub name: String,
    pub joint: usize,
    pub max_effort: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColliderRef {
    Static(usize),
    Body(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Friction {
    Fixed(f64),
    /// Uses the friction entry of the world parameters.
    Uncertain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPair {
    pub a: ColliderRef,
    pub b: ColliderRef,
    pub friction: Friction,
    pub tag: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSettings {
    /// Sigma entry of joint and contact rows (impulse units).
    pub compliance: f64,
    /// Position feedback factor; the rhs of a violated row is `-baumgarte * phi / dt`.
    pub baumgarte: f64,
    pub contact_margin: f64,
    pub direct: DirectOptions,
    pub pgs: PgsOptions,
    /// Largest residual accepted from the PGS fallback.
    pub accept_residual: f64,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self {
            compliance: 1e-8,
            baumgarte: 0.2,
            contact_margin: 5e-4,
            direct: DirectOptions {
                max_size: 256,
                ..DirectOptions::default()
            },
            pgs: PgsOptions::default(),
            accept_residual: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub bodies: Vec<Body>,
    pub joints: Vec<Joint>,
    pub motors: Vec<Motor>,
    pub planes: Vec<HalfPlane>,
    pub contact_pairs: Vec<ContactPair>,
    pub gravity: Vec2,
    pub settings: StepSettings,
    /// Body whose mass is replaced by the mass parameter.
    pub mass_param_body: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    Hinge,
    Prismatic,
    Motor,
    ContactNormal,
    ContactTangent,
    Lock,
}

/// Identity of a multiplier row, stable across steps for warm starting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub kind: ConstraintKind,
    /// Joint, motor or contact-pair index.
    pub owner: usize,
    /// Row within a joint, or contact feature id.
    pub sub: u32,
}

/// One assembled constraint row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub key: RowKey,
    pub jacobian: Vec<(usize, [f64; 3])>,
    pub regularization: f64,
    pub rhs: f64,
    pub lower: f64,
    pub upper: f64,
    /// For tangential rows: index of the normal row and friction coefficient.
    pub friction: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub pair: usize,
    pub tag: u32,
    pub feature: u32,
    pub point: Vec2,
    /// Unit normal from the first collider of the pair to the second.
    pub normal: Vec2,
    pub separation: f64,
    pub mu: f64,
    /// Normal force, >= 0 when pushing the pair apart.
    pub lambda_n: f64,
    /// Tangential force along `normal.perp()`.
    pub lambda_t: f64,
    /// Relative tangential velocity after the step.
    pub slip_velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub step: usize,
    pub poses: Vec<Pose>,
    pub velocities: Vec<Twist>,
    /// Multipliers in force/torque units, one per row of `rows`.
    pub lambda: Vec<f64>,
    pub rows: Vec<RowKey>,
    /// Effort delivered by each motor (force or torque).
    pub motor_efforts: Vec<f64>,
    pub contacts: Vec<Contact>,
}

/// The MLCP of one step together with the row bookkeeping needed to unpack it.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub problem: MlcpProblem,
    pub rows: Vec<ConstraintRow>,
    pub contacts: Vec<Contact>,
    pub dofs: usize,
}

impl System {
    pub fn initial_state(&self) -> SystemState {
        SystemState {
            step: 0,
            poses: self.bodies.iter().map(|b| b.pose).collect(),
            velocities: self.bodies.iter().map(|b| b.velocity).collect(),
            lambda: Vec::new(),
            rows: Vec::new(),
            motor_efforts: vec![0.0; self.motors.len()],
            contacts: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let nb = self.bodies.len();
        let check_ref = |r: BodyRef| match r {
            BodyRef::Body(i) if i >= nb => Err(DynamicsError::InvalidSystem(format!(
                "body reference {i} out of range"
            ))),
            _ => Ok(()),
        };
        for b in &self.bodies {
            if !(b.mass > 0.0 && b.inertia > 0.0) {
                return Err(DynamicsError::InvalidSystem(format!(
                    "body {} needs positive mass and inertia",
                    b.name
                )));
            }
        }
        for j in &self.joints {
            match *j {
                Joint::Hinge { a, b, .. } | Joint::Prismatic { a, b, .. } | Joint::Lock { a, b, .. } => {
                    check_ref(a)?;
                    check_ref(b)?;
                }
            }
        }
        for m in &self.motors {
            match self.joints.get(m.joint) {
                Some(Joint::Hinge { .. }) | Some(Joint::Prismatic { .. }) => {}
                _ => {
                    return Err(DynamicsError::InvalidSystem(format!(
                        "motor {} must drive a hinge or prismatic joint",
                        m.name
                    )))
                }
            }
            if !(m.max_effort > 0.0 && m.gain > 0.0) {
                return Err(DynamicsError::InvalidSystem(format!(
                    "motor {} needs positive effort limit and gain",
                    m.name
                )));
            }
        }
        for p in &self.contact_pairs {
            for c in [p.a, p.b] {
                let ok = match c {
                    ColliderRef::Static(i) => i < self.planes.len(),
                    ColliderRef::Body(i) => i < nb && self.bodies[i].shape.is_some(),
                };
                if !ok {
                    return Err(DynamicsError::InvalidSystem("contact pair references a missing collider".into()));
                }
            }
            if matches!(p.a, ColliderRef::Static(_)) == matches!(p.b, ColliderRef::Static(_))
                && matches!(p.a, ColliderRef::Static(_))
            {
                return Err(DynamicsError::InvalidSystem("static-static contact pair".into()));
            }
        }
        if let Some(i) = self.mass_param_body {
            if i >= nb {
                return Err(DynamicsError::InvalidSystem("mass parameter body out of range".into()));
            }
        }
        Ok(())
    }

    /// Mass and inertia of body `i` under the world parameters.
    pub fn mass_properties(&self, i: usize, theta: &WorldParams) -> (f64, f64) {
        let b = &self.bodies[i];
        if self.mass_param_body == Some(i) {
            (theta.theta_m, b.inertia * theta.theta_m / b.mass)
        } else {
            (b.mass, b.inertia)
        }
    }

    fn friction_of(&self, pair: &ContactPair, theta: &WorldParams) -> f64 {
        match pair.friction {
            Friction::Fixed(mu) => mu,
            Friction::Uncertain => theta.theta_mu,
        }
    }

    pub fn kinetic_energy(&self, state: &SystemState, theta: &WorldParams) -> f64 {
        (0..self.bodies.len())
            .map(|i| {
                let (m, inertia) = self.mass_properties(i, theta);
                let v = state.velocities[i];
                0.5 * m * (v.vx * v.vx + v.vz * v.vz) + 0.5 * inertia * v.omega * v.omega
            })
            .sum()
    }

    pub fn potential_energy(&self, state: &SystemState, theta: &WorldParams) -> f64 {
        (0..self.bodies.len())
            .map(|i| {
                let (m, _) = self.mass_properties(i, theta);
                -m * self.gravity.dot(state.poses[i].position())
            })
            .sum()
    }

    /// Joint coordinate driven by a motor (relative angle or slide offset).
    pub fn joint_position(&self, state: &SystemState, joint: usize) -> f64 {
        match self.joints[joint] {
            Joint::Hinge { a, b, .. } => angle_of(state, b) - angle_of(state, a),
            Joint::Prismatic {
                a,
                b,
                anchor_a,
                anchor_b,
                axis,
                ..
            } => {
                let pa = point_of(state, a, anchor_a);
                let pb = point_of(state, b, anchor_b);
                axis.rotated(angle_of(state, a)).dot(pb - pa)
            }
            Joint::Lock { a, b, .. } => angle_of(state, b) - angle_of(state, a),
        }
    }

    pub fn joint_velocity(&self, state: &SystemState, joint: usize) -> f64 {
        let rows = self.motor_row(state, joint);
        rows.iter()
            .map(|(i, j)| {
                let v = state.velocities[*i];
                j[0] * v.vx + j[1] * v.vz + j[2] * v.omega
            })
            .sum()
    }

    fn motor_row(&self, state: &SystemState, joint: usize) -> Vec<(usize, [f64; 3])> {
        let mut jac = Vec::new();
        match self.joints[joint] {
            Joint::Hinge { a, b, .. } | Joint::Lock { a, b, .. } => {
                push_angular(&mut jac, a, -1.0);
                push_angular(&mut jac, b, 1.0);
            }
            Joint::Prismatic {
                a,
                b,
                anchor_a,
                anchor_b,
                axis,
                ..
            } => {
                let axis_w = axis.rotated(angle_of(state, a));
                prismatic_direction_row(&mut jac, state, a, b, anchor_a, anchor_b, axis_w);
            }
        }
        jac
    }
}

fn angle_of(state: &SystemState, r: BodyRef) -> f64 {
    match r {
        BodyRef::Ground => 0.0,
        BodyRef::Body(i) => state.poses[i].theta,
    }
}

fn point_of(state: &SystemState, r: BodyRef, local: Vec2) -> Vec2 {
    match r {
        BodyRef::Ground => local,
        BodyRef::Body(i) => state.poses[i].transform(local),
    }
}

/// Lever arm from the body origin to a world point (zero for ground).
fn lever(state: &SystemState, r: BodyRef, world: Vec2) -> Vec2 {
    match r {
        BodyRef::Ground => Vec2::ZERO,
        BodyRef::Body(i) => world - state.poses[i].position(),
    }
}

fn push_angular(jac: &mut Vec<(usize, [f64; 3])>, r: BodyRef, sign: f64) {
    if let BodyRef::Body(i) = r {
        jac.push((i, [0.0, 0.0, sign]));
    }
}

/// Jacobian of the velocity of a world point attached to `r`, projected on `dir`.
fn push_point(jac: &mut Vec<(usize, [f64; 3])>, r: BodyRef, lever: Vec2, dir: Vec2, sign: f64) {
    if let BodyRef::Body(i) = r {
        jac.push((i, [sign * dir.x, sign * dir.z, sign * lever.cross(dir)]));
    }
}

/// Rate of `dir · (p_b - p_a)` where `dir` rotates with `a`.
fn prismatic_direction_row(
    jac: &mut Vec<(usize, [f64; 3])>,
    state: &SystemState,
    a: BodyRef,
    b: BodyRef,
    anchor_a: Vec2,
    anchor_b: Vec2,
    dir: Vec2,
) {
    let pa = point_of(state, a, anchor_a);
    let pb = point_of(state, b, anchor_b);
    let d = pb - pa;
    push_point(jac, a, lever(state, a, pa), dir, -1.0);
    // the direction itself turns with body a
    if let BodyRef::Body(i) = a {
        if let Some(entry) = jac.iter_mut().rev().find(|(k, _)| *k == i) {
            entry.1[2] += dir.perp().dot(d);
        }
    }
    push_point(jac, b, lever(state, b, pb), dir, 1.0);
}

fn check_state(system: &System, state: &SystemState) -> Result<(), DynamicsError> {
    if state.poses.len() != system.bodies.len() || state.velocities.len() != system.bodies.len() {
        return Err(DynamicsError::InvalidSystem("state does not match system bodies".into()));
    }
    if state
        .poses
        .iter()
        .any(|p| !(p.x.is_finite() && p.z.is_finite() && p.theta.is_finite()))
    {
        return Err(DynamicsError::NonFinite("pose"));
    }
    if state
        .velocities
        .iter()
        .any(|v| !(v.vx.is_finite() && v.vz.is_finite() && v.omega.is_finite()))
    {
        return Err(DynamicsError::NonFinite("velocity"));
    }
    if state.lambda.iter().any(|l| !l.is_finite()) {
        return Err(DynamicsError::NonFinite("multiplier"));
    }
    Ok(())
}

/// Contact points of every configured pair at the current poses.
pub fn detect_contacts(system: &System, state: &SystemState, theta: &WorldParams) -> Vec<Contact> {
    let margin = system.settings.contact_margin;
    let obb = |i: usize| match system.bodies[i].shape {
        Some(Shape::Rect { half_w, half_h }) => Obb::new(&state.poses[i], half_w, half_h),
        None => unreachable!("validated: colliding bodies have shapes"),
    };
    let mut out = Vec::new();
    for (k, pair) in system.contact_pairs.iter().enumerate() {
        let points = match (pair.a, pair.b) {
            (ColliderRef::Static(p), ColliderRef::Body(b)) => {
                geometry::collide_plane_rect(&system.planes[p], &obb(b), margin)
            }
            (ColliderRef::Body(b), ColliderRef::Static(p)) => {
                let mut pts = geometry::collide_plane_rect(&system.planes[p], &obb(b), margin);
                for pt in &mut pts {
                    pt.normal = -pt.normal;
                }
                pts
            }
            (ColliderRef::Body(a), ColliderRef::Body(b)) => geometry::collide_rects(&obb(a), &obb(b), margin),
            (ColliderRef::Static(_), ColliderRef::Static(_)) => Vec::new(),
        };
        let mu = system.friction_of(pair, theta);
        out.extend(points.into_iter().map(|p| Contact {
            pair: k,
            tag: pair.tag,
            feature: p.feature,
            point: p.point,
            normal: p.normal,
            separation: p.separation,
            mu,
            lambda_n: 0.0,
            lambda_t: 0.0,
            slip_velocity: 0.0,
        }));
    }
    out
}

fn collider_body(c: ColliderRef) -> BodyRef {
    match c {
        ColliderRef::Static(_) => BodyRef::Ground,
        ColliderRef::Body(i) => BodyRef::Body(i),
    }
}

/// Builds the saddle-point MLCP of one step.
pub fn assemble(
    system: &System,
    state: &SystemState,
    u: &[f64],
    theta: &WorldParams,
    dt: f64,
) -> Result<Assembled, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    if u.len() != system.motors.len() {
        return Err(DynamicsError::ControlSize {
            expected: system.motors.len(),
            got: u.len(),
        });
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(DynamicsError::NonFinite("control"));
    }
    check_state(system, state)?;
    let s = &system.settings;
    let beta = s.baumgarte / dt;
    let mut rows: Vec<ConstraintRow> = Vec::new();

    for (k, joint) in system.joints.iter().enumerate() {
        match *joint {
            Joint::Hinge {
                a,
                b,
                anchor_a,
                anchor_b,
            } => {
                let pa = point_of(state, a, anchor_a);
                let pb = point_of(state, b, anchor_b);
                let err = pb - pa;
                for (sub, dir) in [Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)].into_iter().enumerate() {
                    let mut jac = Vec::new();
                    push_point(&mut jac, a, lever(state, a, pa), dir, -1.0);
                    push_point(&mut jac, b, lever(state, b, pb), dir, 1.0);
                    rows.push(ConstraintRow {
                        key: RowKey {
                            kind: ConstraintKind::Hinge,
                            owner: k,
                            sub: sub as u32,
                        },
                        jacobian: jac,
                        regularization: s.compliance,
                        rhs: -beta * dir.dot(err),
                        lower: f64::NEG_INFINITY,
                        upper: f64::INFINITY,
                        friction: None,
                    });
                }
            }
            Joint::Prismatic {
                a,
                b,
                anchor_a,
                anchor_b,
                axis,
                ref_angle,
            } => {
                let normal = axis.rotated(angle_of(state, a)).perp();
                let offset = normal.dot(point_of(state, b, anchor_b) - point_of(state, a, anchor_a));
                let mut jac = Vec::new();
                prismatic_direction_row(&mut jac, state, a, b, anchor_a, anchor_b, normal);
                rows.push(ConstraintRow {
                    key: RowKey {
                        kind: ConstraintKind::Prismatic,
                        owner: k,
                        sub: 0,
                    },
                    jacobian: jac,
                    regularization: s.compliance,
                    rhs: -beta * offset,
                    lower: f64::NEG_INFINITY,
                    upper: f64::INFINITY,
                    friction: None,
                });
                let mut jac = Vec::new();
                push_angular(&mut jac, a, -1.0);
                push_angular(&mut jac, b, 1.0);
                let err = angle_of(state, b) - angle_of(state, a) - ref_angle;
                rows.push(ConstraintRow {
                    key: RowKey {
                        kind: ConstraintKind::Prismatic,
                        owner: k,
                        sub: 1,
                    },
                    jacobian: jac,
                    regularization: s.compliance,
                    rhs: -beta * err,
                    lower: f64::NEG_INFINITY,
                    upper: f64::INFINITY,
                    friction: None,
                });
            }
            Joint::Lock { a, b, ref_angle } => {
                let mut jac = Vec::new();
                push_angular(&mut jac, a, -1.0);
                push_angular(&mut jac, b, 1.0);
                let err = angle_of(state, b) - angle_of(state, a) - ref_angle;
                rows.push(ConstraintRow {
                    key: RowKey {
                        kind: ConstraintKind::Lock,
                        owner: k,
                        sub: 0,
                    },
                    jacobian: jac,
                    regularization: s.compliance,
                    rhs: -beta * err,
                    lower: f64::NEG_INFINITY,
                    upper: f64::INFINITY,
                    friction: None,
                });
            }
        }
    }

    for (k, motor) in system.motors.iter().enumerate() {
        rows.push(ConstraintRow {
            key: RowKey {
                kind: ConstraintKind::Motor,
                owner: k,
                sub: 0,
            },
            jacobian: system.motor_row(state, motor.joint),
            regularization: 1.0 / (motor.gain * dt),
            rhs: u[k],
            lower: -motor.max_effort * dt,
            upper: motor.max_effort * dt,
            friction: None,
        });
    }

    let contacts = detect_contacts(system, state, theta);
    for c in &contacts {
        let pair = &system.contact_pairs[c.pair];
        let (a, b) = (collider_body(pair.a), collider_body(pair.b));
        let la = lever(state, a, c.point);
        let lb = lever(state, b, c.point);
        let tangent = c.normal.perp();
        let mut jn = Vec::new();
        push_point(&mut jn, a, la, c.normal, -1.0);
        push_point(&mut jn, b, lb, c.normal, 1.0);
        let rhs = if c.separation < 0.0 {
            -beta * c.separation
        } else {
            -c.separation / dt
        };
        let normal_index = rows.len();
        rows.push(ConstraintRow {
            key: RowKey {
                kind: ConstraintKind::ContactNormal,
                owner: c.pair,
                sub: c.feature,
            },
            jacobian: jn,
            regularization: s.compliance,
            rhs,
            lower: 0.0,
            upper: f64::INFINITY,
            friction: None,
        });
        let mut jt = Vec::new();
        push_point(&mut jt, a, la, tangent, -1.0);
        push_point(&mut jt, b, lb, tangent, 1.0);
        rows.push(ConstraintRow {
            key: RowKey {
                kind: ConstraintKind::ContactTangent,
                owner: c.pair,
                sub: c.feature,
            },
            jacobian: jt,
            regularization: s.compliance,
            rhs: 0.0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            friction: Some((normal_index, c.mu)),
        });
    }

    let nb = system.bodies.len();
    let dofs = 3 * nb;
    let n = dofs + rows.len();
    let mut h = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for i in 0..nb {
        let (m, inertia) = system.mass_properties(i, theta);
        let v = state.velocities[i];
        let ext = system.bodies[i].external_force;
        let f = [
            m * system.gravity.x + ext[0],
            m * system.gravity.z + ext[1],
            ext[2],
        ];
        let diag = [m, m, inertia];
        let vel = [v.vx, v.vz, v.omega];
        for d in 0..3 {
            h[(3 * i + d, 3 * i + d)] = diag[d];
            rhs[3 * i + d] = diag[d] * vel[d] + dt * f[d];
        }
    }
    let mut links = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let ri = dofs + r;
        for &(body, j) in &row.jacobian {
            for d in 0..3 {
                h[(ri, 3 * body + d)] += j[d];
                h[(3 * body + d, ri)] -= j[d];
            }
        }
        h[(ri, ri)] = row.regularization;
        rhs[ri] = row.rhs;
        lower[ri] = row.lower;
        upper[ri] = row.upper;
        if let Some((normal, mu)) = row.friction {
            links.push(FrictionLink {
                tangent: ri,
                normal: dofs + normal,
                mu,
            });
        }
    }
    let problem = MlcpProblem::with_friction(h, rhs, lower, upper, links).map_err(|e| {
        DynamicsError::SolverFailure {
            step: state.step,
            source: e,
        }
    })?;
    Ok(Assembled {
        problem,
        rows,
        contacts,
        dofs,
    })
}

/// Warm start: current velocities plus last step's multipliers matched by row key.
fn warm_start(state: &SystemState, asm: &Assembled, dt: f64) -> DVector<f64> {
    let n = asm.problem.dim();
    let mut y = DVector::zeros(n);
    for (i, v) in state.velocities.iter().enumerate() {
        y[3 * i] = v.vx;
        y[3 * i + 1] = v.vz;
        y[3 * i + 2] = v.omega;
    }
    let previous: BTreeMap<RowKey, f64> = state
        .rows
        .iter()
        .copied()
        .zip(state.lambda.iter().copied())
        .collect();
    for (r, row) in asm.rows.iter().enumerate() {
        if let Some(l) = previous.get(&row.key) {
            y[asm.dofs + r] = l * dt;
        }
    }
    y
}

/// Solves one step's MLCP: block-pivot first, projected Gauss-Seidel if that fails.
pub fn solve_step(
    system: &System,
    state: &SystemState,
    asm: &Assembled,
    dt: f64,
) -> Result<lcp::MlcpSolution, DynamicsError> {
    let ws = warm_start(state, asm, dt);
    let direct = DirectOptions {
        warm_start: Some(ws.clone()),
        ..system.settings.direct.clone()
    };
    match lcp::solve_direct(&asm.problem, &direct) {
        Ok(sol) => Ok(sol),
        Err(first) => {
            let pgs = PgsOptions {
                warm_start: Some(ws),
                ..system.settings.pgs.clone()
            };
            let sol = lcp::solve_pgs(&asm.problem, &pgs).map_err(|e| DynamicsError::SolverFailure {
                step: state.step,
                source: e,
            })?;
            if sol.residual <= system.settings.accept_residual {
                Ok(sol)
            } else {
                Err(DynamicsError::SolverFailure {
                    step: state.step,
                    source: first,
                })
            }
        }
    }
}

/// Advances the system by one step.
pub fn step(
    system: &System,
    state: &SystemState,
    u: &[f64],
    theta: &WorldParams,
    dt: f64,
) -> Result<SystemState, DynamicsError> {
    let asm = assemble(system, state, u, theta, dt)?;
    let sol = solve_step(system, state, &asm, dt)?;
    let nb = system.bodies.len();

    let velocities: Vec<Twist> = (0..nb)
        .map(|i| Twist::new(sol.y[3 * i], sol.y[3 * i + 1], sol.y[3 * i + 2]))
        .collect();
    let poses: Vec<Pose> = state
        .poses
        .iter()
        .zip(&velocities)
        .map(|(p, v)| Pose::new(p.x + v.vx * dt, p.z + v.vz * dt, p.theta + v.omega * dt))
        .collect();
    let lambda: Vec<f64> = (0..asm.rows.len()).map(|r| sol.y[asm.dofs + r] / dt).collect();

    let row_rate = |row: &ConstraintRow| -> f64 {
        row.jacobian
            .iter()
            .map(|(b, j)| {
                let v = velocities[*b];
                j[0] * v.vx + j[1] * v.vz + j[2] * v.omega
            })
            .sum()
    };

    let mut motor_efforts = vec![0.0; system.motors.len()];
    let mut contacts = asm.contacts.clone();
    let mut contact_cursor = 0;
    for (r, row) in asm.rows.iter().enumerate() {
        match row.key.kind {
            ConstraintKind::Motor => motor_efforts[row.key.owner] = lambda[r],
            ConstraintKind::ContactNormal => contacts[contact_cursor].lambda_n = lambda[r],
            ConstraintKind::ContactTangent => {
                let c = &mut contacts[contact_cursor];
                c.lambda_t = lambda[r];
                c.slip_velocity = row_rate(row);
                contact_cursor += 1;
            }
            _ => {}
        }
    }

    let next = SystemState {
        step: state.step + 1,
        poses,
        velocities,
        lambda,
        rows: asm.rows.iter().map(|r| r.key).collect(),
        motor_efforts,
        contacts,
    };
    check_state(system, &next)?;
    Ok(next)
}
