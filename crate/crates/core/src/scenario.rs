//! Planar two-gripper handover world, its scripted policy and task rewards.
//!
//! Each arm is a link on a motorized hinge with a carriage pinned at the tip.
//! The carriage keeps a fixed orientation and carries two pads on motorized
//! prismatic joints. The giving arm (on the right, +x) grasps the box low,
//! lifts it to the transfer pose and releases it; the receiving arm (on the
//! left) grasps it high and lowers it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    Body, BodyRef, ColliderRef, Contact, ContactPair, Friction, HalfPlane, Joint, Motor, Pose,
    Shape, StepSettings, System, SystemState, Vec2,
};
use crate::safety::{fos_combined, fos_contact, fos_motor, FosSample, MotorReduction};
use crate::uncertainty::ParamDomain;

pub const GRAVITY: f64 = 9.81;
/// Normal force above which a contact counts as touching (N).
pub const TOUCH_FORCE: f64 = 1e-6;

pub const TAG_TABLE: u32 = 0;
pub const TAG_GIVING: u32 = 1;
pub const TAG_RECEIVING: u32 = 2;

/// Uncertain world parameters: box mass (kg) and pad-box friction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub theta_m: f64,
    pub theta_mu: f64,
}

impl WorldParams {
    pub const fn new(theta_m: f64, theta_mu: f64) -> Self {
        Self { theta_m, theta_mu }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("world parameters ({theta_m}, {theta_mu}) lie outside the parameter domain")]
    OutsideDomain { theta_m: f64, theta_mu: f64 },
    #[error("invalid scenario geometry: {0}")]
    InvalidGeometry(String),
}

/// Step indices of the scripted phases (at the configured rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseTable {
    pub grip_close: [usize; 2],
    pub lift: [usize; 2],
    pub receive_close: [usize; 2],
    pub release: [usize; 2],
    pub lower: [usize; 2],
}

impl Default for PhaseTable {
    fn default() -> Self {
        Self {
            grip_close: [48, 168],
            lift: [168, 528],
            receive_close: [576, 696],
            release: [696, 816],
            lower: [816, 936],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub link_length: f64,
    pub link_mass: f64,
    pub carriage_mass: f64,
    pub pad_mass: f64,
    pub pad_size: [f64; 2],
    pub box_size: [f64; 2],
    /// Reference box mass; inertia scales with the mass parameter.
    pub box_reference_mass: f64,
    pub table_friction: f64,
    /// Height of the giving pads above the box bottom.
    pub giving_grip_height: f64,
    /// Height of the receiving pads above the box center.
    pub receiving_grip_offset: f64,
    pub lift_height: f64,
    pub lower_height: f64,
    pub lift_max_torque: f64,
    pub lift_gain: f64,
    pub lift_kp: f64,
    pub lift_max_speed: f64,
    pub grip_max_force: f64,
    pub grip_gain: f64,
    pub grip_kp: f64,
    pub grip_max_speed: f64,
    pub grip_open_gap: f64,
    /// Commanded pad travel past the box face when closed (giving, receiving).
    pub grip_squeeze: [f64; 2],
    pub phases: PhaseTable,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            link_length: 0.35,
            link_mass: 0.3,
            carriage_mass: 0.25,
            pad_mass: 0.05,
            pad_size: [0.01, 0.03],
            box_size: [0.05, 0.12],
            box_reference_mass: 0.25,
            table_friction: 0.8,
            giving_grip_height: 0.035,
            receiving_grip_offset: 0.035,
            lift_height: 0.08,
            lower_height: 0.03,
            lift_max_torque: 5.0,
            lift_gain: 2000.0,
            lift_kp: 20.0,
            lift_max_speed: 2.0,
            grip_max_force: 20.0,
            grip_gain: 200.0,
            grip_kp: 10.0,
            grip_max_speed: 0.1,
            grip_open_gap: 0.01,
            grip_squeeze: [0.004, 0.005],
            phases: PhaseTable::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = [
            ("link_length", self.link_length),
            ("link_mass", self.link_mass),
            ("carriage_mass", self.carriage_mass),
            ("pad_mass", self.pad_mass),
            ("pad_size[0]", self.pad_size[0]),
            ("pad_size[1]", self.pad_size[1]),
            ("box_size[0]", self.box_size[0]),
            ("box_size[1]", self.box_size[1]),
            ("box_reference_mass", self.box_reference_mass),
            ("lift_max_torque", self.lift_max_torque),
            ("lift_gain", self.lift_gain),
            ("grip_max_force", self.grip_max_force),
            ("grip_gain", self.grip_gain),
            ("lift_max_speed", self.lift_max_speed),
            ("grip_max_speed", self.grip_max_speed),
            ("grip_open_gap", self.grip_open_gap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScenarioError::InvalidGeometry(format!("{name} must be positive")));
            }
        }
        if !(self.lift_height > 0.0 && self.lift_height < self.link_length) {
            return Err(ScenarioError::InvalidGeometry(
                "lift_height must lie in (0, link_length)".into(),
            ));
        }
        if !(self.lower_height >= 0.0 && self.lower_height < self.lift_height) {
            return Err(ScenarioError::InvalidGeometry(
                "lower_height must lie in [0, lift_height)".into(),
            ));
        }
        let p = &self.phases;
        let order = [
            p.grip_close[0],
            p.grip_close[1],
            p.lift[0],
            p.lift[1],
            p.receive_close[0],
            p.receive_close[1],
            p.release[0],
            p.release[1],
            p.lower[0],
            p.lower[1],
        ];
        if order.windows(2).any(|w| w[0] > w[1]) || p.grip_close[0] == p.grip_close[1] {
            return Err(ScenarioError::InvalidGeometry("phase table must be non-decreasing".into()));
        }
        Ok(())
    }

    /// Lift angle reaching the transfer pose.
    pub fn transfer_angle(&self) -> f64 {
        (self.lift_height / self.link_length).asin()
    }

    /// Equivalent point mass at the link tip contributed by one arm.
    pub fn arm_tip_mass(&self) -> f64 {
        self.carriage_mass + 2.0 * self.pad_mass + 0.5 * self.link_mass
    }

    /// Lift torque needed to hold the arm and the box with the link horizontal.
    pub fn static_lift_torque(&self, theta_m: f64) -> f64 {
        GRAVITY * self.link_length * (theta_m + self.arm_tip_mass())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmRole {
    Giving,
    Receiving,
}

/// Body, joint and motor indices of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub role: ArmRole,
    pub link: usize,
    pub carriage: usize,
    pub pads: [usize; 2],
    pub lift_joint: usize,
    pub pad_joints: [usize; 2],
    pub lift_motor: usize,
    pub grip_motors: [usize; 2],
    pub tag: u32,
}

impl Arm {
    pub fn motors(&self) -> [usize; 3] {
        [self.lift_motor, self.grip_motors[0], self.grip_motors[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandoverWorld {
    pub system: System,
    pub theta: WorldParams,
    pub config: ScenarioConfig,
    pub box_body: usize,
    /// Giving arm first, receiving arm second.
    pub arms: [Arm; 2],
    /// Pad joint coordinates: open and closed, for each arm and pad.
    grip_open: [[f64; 2]; 2],
    grip_closed: [[f64; 2]; 2],
}

/// Task progress mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct RewardMode(pub u8);

impl RewardMode {
    pub fn value(self) -> u8 {
        self.0
    }

    /// Modes where slip at the grasp is expected and not flagged.
    pub fn is_contact_transition(self) -> bool {
        matches!(self.0, 1 | 3)
    }
}

/// Which bodies touch the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContactFlags {
    pub table: bool,
    pub giving: bool,
    pub receiving: bool,
}

/// Mode implied by the contact flags, if any.
pub fn mode_of(flags: ContactFlags) -> Option<u8> {
    match (flags.table, flags.giving, flags.receiving) {
        (true, false, false) => Some(0),
        (true, true, _) => Some(1),
        (false, true, false) => Some(2),
        (false, true, true) => Some(3),
        (false, false, true) => Some(4),
        // receiving touches a box still on the table, or the box is airborne
        (true, false, true) | (false, false, false) => None,
    }
}

/// Next reward: the mode implied by the contacts, never below `previous`.
pub fn reward(flags: ContactFlags, previous: RewardMode) -> RewardMode {
    match mode_of(flags) {
        Some(m) => RewardMode(m.max(previous.0)),
        None => previous,
    }
}

fn quintic(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let p = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let dp = 30.0 * s * s * (1.0 - s) * (1.0 - s);
    (p, dp)
}

/// Reference position and velocity blending from `a` to `b` over `window`.
fn blend(k: usize, window: [usize; 2], a: f64, b: f64, dt: f64) -> (f64, f64) {
    if k < window[0] {
        return (a, 0.0);
    }
    if k >= window[1] {
        return (b, 0.0);
    }
    let span = (window[1] - window[0]) as f64;
    let (p, dp) = quintic((k - window[0]) as f64 / span);
    (a + (b - a) * p, (b - a) * dp / (span * dt))
}

pub fn build_handover(
    theta: WorldParams,
    config: &ScenarioConfig,
    domain: &ParamDomain,
) -> Result<HandoverWorld, ScenarioError> {
    if !domain.contains(&theta) {
        return Err(ScenarioError::OutsideDomain {
            theta_m: theta.theta_m,
            theta_mu: theta.theta_mu,
        });
    }
    config.validate()?;
    let c = config;
    let l = c.link_length;
    let [bw, bh] = [0.5 * c.box_size[0], 0.5 * c.box_size[1]];
    let [pw, ph] = [0.5 * c.pad_size[0], 0.5 * c.pad_size[1]];
    if c.giving_grip_height - ph < 0.0 || c.giving_grip_height + ph > 2.0 * bh {
        return Err(ScenarioError::InvalidGeometry("giving pads must fit on the box side".into()));
    }
    if c.receiving_grip_offset.abs() + ph > bh {
        return Err(ScenarioError::InvalidGeometry("receiving pads must fit on the box side".into()));
    }

    let delta = c.transfer_angle();
    // the giving carriage drifts outward as the link turns up
    let transfer_x = l * (1.0 - delta.cos());
    let transfer_center_z = bh + c.lift_height;
    let giving_z = c.giving_grip_height;
    let receiving_z = transfer_center_z + c.receiving_grip_offset;
    if receiving_z - ph < 2.0 * bh {
        return Err(ScenarioError::InvalidGeometry(
            "receiving pads must start above the resting box".into(),
        ));
    }

    let mut bodies = Vec::new();
    let box_inertia = c.box_reference_mass * (c.box_size[0].powi(2) + c.box_size[1].powi(2)) / 12.0;
    bodies.push(
        Body::new("box", c.box_reference_mass, box_inertia, Pose::new(0.0, bh, 0.0))
            .with_shape(Shape::Rect { half_w: bw, half_h: bh }),
    );
    let box_body = 0;

    let mut joints = Vec::new();
    let mut motors = Vec::new();
    let mut pairs = vec![ContactPair {
        a: ColliderRef::Static(0),
        b: ColliderRef::Body(box_body),
        friction: Friction::Fixed(c.table_friction),
        tag: TAG_TABLE,
    }];

    let open = bw + pw + c.grip_open_gap;
    let closed = c.grip_squeeze.map(|sq| bw + pw - sq);
    let mut arms = Vec::new();
    let specs = [
        (ArmRole::Giving, "giving", Vec2::new(l, giving_z), std::f64::consts::PI, 0.0, TAG_GIVING),
        (
            ArmRole::Receiving,
            "receiving",
            Vec2::new(transfer_x - l, receiving_z),
            0.0,
            transfer_x,
            TAG_RECEIVING,
        ),
    ];
    for (role, name, pivot, angle, tip_x, tag) in specs {
        let dir = Vec2::new(angle.cos(), angle.sin());
        let link = bodies.len();
        let center = pivot + dir * (0.5 * l);
        bodies.push(Body::new(
            format!("{name}_link"),
            c.link_mass,
            c.link_mass * l * l / 12.0,
            Pose::new(center.x, center.z, angle),
        ));
        let tip = pivot + dir * l;
        debug_assert!((tip.x - tip_x).abs() < 1e-12);
        let carriage = bodies.len();
        bodies.push(Body::new(
            format!("{name}_carriage"),
            c.carriage_mass,
            c.carriage_mass * 0.04f64.powi(2) / 6.0,
            Pose::new(tip.x, tip.z, 0.0),
        ));
        let pad_inertia = c.pad_mass * (c.pad_size[0].powi(2) + c.pad_size[1].powi(2)) / 12.0;
        let pads = [bodies.len(), bodies.len() + 1];
        for (side, x) in [("neg", -open), ("pos", open)] {
            bodies.push(
                Body::new(
                    format!("{name}_pad_{side}"),
                    c.pad_mass,
                    pad_inertia,
                    Pose::new(tip.x + x, tip.z, 0.0),
                )
                .with_shape(Shape::Rect { half_w: pw, half_h: ph }),
            );
        }

        // the lift coordinate increases as the tip rises for both arms
        let lift_joint = joints.len();
        joints.push(match role {
            ArmRole::Giving => Joint::Hinge {
                a: BodyRef::Body(link),
                b: BodyRef::Ground,
                anchor_a: Vec2::new(-0.5 * l, 0.0),
                anchor_b: pivot,
            },
            ArmRole::Receiving => Joint::Hinge {
                a: BodyRef::Ground,
                b: BodyRef::Body(link),
                anchor_a: pivot,
                anchor_b: Vec2::new(-0.5 * l, 0.0),
            },
        });
        joints.push(Joint::Hinge {
            a: BodyRef::Body(link),
            b: BodyRef::Body(carriage),
            anchor_a: Vec2::new(0.5 * l, 0.0),
            anchor_b: Vec2::ZERO,
        });
        joints.push(Joint::Lock {
            a: BodyRef::Ground,
            b: BodyRef::Body(carriage),
            ref_angle: 0.0,
        });
        let pad_joints = [joints.len(), joints.len() + 1];
        for &pad in &pads {
            joints.push(Joint::Prismatic {
                a: BodyRef::Body(carriage),
                b: BodyRef::Body(pad),
                anchor_a: Vec2::ZERO,
                anchor_b: Vec2::ZERO,
                axis: Vec2::new(1.0, 0.0),
                ref_angle: 0.0,
            });
        }

        let lift_motor = motors.len();
        motors.push(Motor {
            name: format!("{name}_lift"),
            joint: lift_joint,
            max_effort: c.lift_max_torque,
            gain: c.lift_gain,
        });
        let grip_motors = [motors.len(), motors.len() + 1];
        for (i, side) in ["neg", "pos"].iter().enumerate() {
            motors.push(Motor {
                name: format!("{name}_grip_{side}"),
                joint: pad_joints[i],
                max_effort: c.grip_max_force,
                gain: c.grip_gain,
            });
        }
        for &pad in &pads {
            pairs.push(ContactPair {
                a: ColliderRef::Body(pad),
                b: ColliderRef::Body(box_body),
                friction: Friction::Uncertain,
                tag,
            });
        }
        arms.push(Arm {
            role,
            link,
            carriage,
            pads,
            lift_joint,
            pad_joints,
            lift_motor,
            grip_motors,
            tag,
        });
    }

    let system = System {
        bodies,
        joints,
        motors,
        planes: vec![HalfPlane {
            normal: Vec2::new(0.0, 1.0),
            offset: 0.0,
        }],
        contact_pairs: pairs,
        gravity: Vec2::new(0.0, -GRAVITY),
        settings: StepSettings::default(),
        mass_param_body: Some(box_body),
    };
    system
        .validate()
        .map_err(|e| ScenarioError::InvalidGeometry(e.to_string()))?;
    let arms: [Arm; 2] = arms.try_into().expect("two arms");
    Ok(HandoverWorld {
        system,
        theta,
        config: config.clone(),
        box_body,
        arms,
        grip_open: [[-open, open]; 2],
        grip_closed: [[-closed[0], closed[0]], [-closed[1], closed[1]]],
    })
}

impl HandoverWorld {
    pub fn initial_state(&self) -> SystemState {
        self.system.initial_state()
    }

    pub fn giving(&self) -> &Arm {
        &self.arms[0]
    }

    pub fn receiving(&self) -> &Arm {
        &self.arms[1]
    }

    pub fn contact_flags(&self, state: &SystemState) -> ContactFlags {
        let touching = |tag: u32| {
            state
                .contacts
                .iter()
                .any(|c| c.tag == tag && c.lambda_n > TOUCH_FORCE)
        };
        ContactFlags {
            table: touching(TAG_TABLE),
            giving: touching(TAG_GIVING),
            receiving: touching(TAG_RECEIVING),
        }
    }

    /// Pad-box contacts of both arms.
    pub fn grasp_contacts<'a>(&self, state: &'a SystemState) -> impl Iterator<Item = &'a Contact> + 'a {
        state
            .contacts
            .iter()
            .filter(|c| c.tag == TAG_GIVING || c.tag == TAG_RECEIVING)
    }

    /// Motors of every arm whose pads touch the box (lift and grip).
    pub fn engaged_motors(&self, state: &SystemState) -> Vec<usize> {
        let flags = self.contact_flags(state);
        let mut out = Vec::new();
        for (arm, engaged) in self.arms.iter().zip([flags.giving, flags.receiving]) {
            if engaged {
                out.extend(arm.motors());
            }
        }
        out
    }

    /// Joint-space reference (position, velocity) of every motor at step `k`.
    pub fn reference(&self, k: usize, dt: f64) -> Vec<(f64, f64)> {
        let c = &self.config;
        let ph = &c.phases;
        let mut refs = vec![(0.0, 0.0); self.system.motors.len()];
        let delta = c.transfer_angle();
        let lower = -((c.lower_height / c.link_length).asin());

        let g = self.giving();
        // giving lift coordinate is minus the link angle, starting at -pi
        let start = -std::f64::consts::PI;
        refs[g.lift_motor] = blend(k, ph.lift, start, start + delta, dt);
        for i in 0..2 {
            let close = blend(k, ph.grip_close, self.grip_open[0][i], self.grip_closed[0][i], dt);
            refs[g.grip_motors[i]] = if k < ph.release[0] {
                close
            } else {
                blend(k, ph.release, self.grip_closed[0][i], self.grip_open[0][i], dt)
            };
        }

        let r = self.receiving();
        refs[r.lift_motor] = blend(k, ph.lower, 0.0, lower, dt);
        for i in 0..2 {
            refs[r.grip_motors[i]] =
                blend(k, ph.receive_close, self.grip_open[1][i], self.grip_closed[1][i], dt);
        }
        refs
    }

    /// Scripted waypoint controller: motor velocity targets at step `k`.
    pub fn policy(&self, state: &SystemState, k: usize, dt: f64) -> Vec<f64> {
        let c = &self.config;
        self.reference(k, dt)
            .into_iter()
            .enumerate()
            .map(|(m, (q_ref, qd_ref))| {
                let motor = &self.system.motors[m];
                let q = self.system.joint_position(state, motor.joint);
                let is_lift = self.arms.iter().any(|a| a.lift_motor == m);
                let (kp, vmax) = if is_lift {
                    (c.lift_kp, c.lift_max_speed)
                } else {
                    (c.grip_kp, c.grip_max_speed)
                };
                (qd_ref + kp * (q_ref - q)).clamp(-vmax, vmax)
            })
            .collect()
    }

    /// Effort and limit of each listed motor in `state`.
    pub fn motor_loads(&self, state: &SystemState, motors: &[usize]) -> Vec<(f64, f64)> {
        motors
            .iter()
            .map(|&m| (state.motor_efforts[m], self.system.motors[m].max_effort))
            .collect()
    }

    /// Inverse factors of safety of `state` under reward mode `r`.
    pub fn fos(&self, state: &SystemState, r: RewardMode, reduction: MotorReduction) -> FosSample {
        let contact = fos_contact(self.grasp_contacts(state), r);
        let engaged = self.engaged_motors(state);
        // nothing engaged means nothing can saturate
        let motor = fos_motor(&self.motor_loads(state, &engaged), reduction).unwrap_or(0.0);
        fos_combined(state.step, contact, motor)
    }

    pub fn box_pose(&self, state: &SystemState) -> Pose {
        state.poses[self.box_body]
    }
}
