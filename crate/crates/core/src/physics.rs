//! Planar (sagittal) articulated rigid-body simulator.
//!
//! The body is a tree of rectangular links rooted at the torso, described in
//! generalized coordinates `q = [x, y, theta, q_1 .. q_J]`: the torso centre of
//! mass, the torso angle and one relative angle per revolute joint. Angles are
//! counter-clockwise positive, `x` points forward and `y` up; the ground is the
//! line `y = 0`.
//!
//! Integration is semi-implicit Euler carried out on the generalized momentum
//! `p = M(q) q'`:
//!
//! ```text
//! (M + dt D) v      = M q'_n + dt (Q + dT/dq)
//! q_{n+1}           = q_n + dt v
//! q'_{n+1}          = M(q_{n+1})^-1 (M v)
//! ```
//!
//! where `Q` collects gravity, joint torques, joint springs and contact springs,
//! `D` collects every linear damper (joint damping, contact normal damping and
//! sticking friction) and `dT/dq` is the configuration gradient of the kinetic
//! energy at fixed velocities. Because the translational rows of `Q`, `dT/dq` and
//! `D` only receive external forces, total linear momentum is preserved to
//! round-off whenever gravity and contact are absent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of generalized coordinates owned by the floating torso.
pub const ROOT_DOFS: usize = 3;

const FOOT_MOVING_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid morphology: {0}")]
    InvalidMorphology(String),
    #[error("timestep {0} outside (0, 0.01]")]
    InvalidTimestep(f64),
    #[error("action has {got} components, morphology has {expected} joints")]
    ActionDimension { expected: usize, got: usize },
    #[error("action contains a non-finite torque")]
    NonFiniteAction,
    #[error("simulation state became non-finite at t = {time:.4} s")]
    NonFiniteState { time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    /// Extent along the link's local `y` axis, metres.
    pub length: f64,
    pub mass: f64,
    /// Rotational inertia about the centre of mass, kg m^2.
    pub inertia: f64,
    /// Half extent along the local `x` axis, metres.
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: usize,
    pub child: usize,
    /// Joint location in the parent's local frame.
    pub parent_anchor: [f64; 2],
    /// Joint location in the child's local frame.
    pub child_anchor: [f64; 2],
    /// Constant rotation added between parent and child, radians.
    #[serde(default)]
    pub angle_offset: f64,
    /// Lower and upper joint angle, radians.
    pub limits: [f64; 2],
    pub torque_limit: f64,
    /// Passive spring toward `rest_angle`, N m / rad.
    #[serde(default)]
    pub stiffness: f64,
    /// Passive viscous damping, N m s / rad.
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub rest_angle: f64,
}

/// Link/joint description of an articulated body.
///
/// JSON schema (all units SI):
///
/// ```json
/// {
///   "name": "walker2d",
///   "links":  [{"name": "torso", "length": 0.4, "mass": 3.5, "inertia": 0.05, "half_width": 0.07}],
///   "joints": [{"name": "hip_r", "parent": 0, "child": 1,
///               "parent_anchor": [0.0, -0.2], "child_anchor": [0.0, 0.225],
///               "angle_offset": 0.0, "limits": [-0.8, 1.6], "torque_limit": 100.0,
///               "stiffness": 20.0, "damping": 2.0, "rest_angle": 0.0}],
///   "feet": [3, 6],
///   "torso": 0
/// }
/// ```
///
/// Link `i` is a rectangle spanning `[-half_width, half_width] x [-length/2, length/2]`
/// in its own frame, centred on its centre of mass. `stiffness`, `damping`,
/// `angle_offset` and `rest_angle` default to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologySpec {
    pub name: String,
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
    pub feet: Vec<usize>,
    pub torso: usize,
}

impl MorphologySpec {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let spec: MorphologySpec = serde_json::from_str(text)
            .map_err(|e| SimError::InvalidMorphology(format!("json: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Seven-link biped: torso, then thigh/shin/foot for the right and left legs.
    pub fn walker2d() -> Self {
        Self::from_json(include_str!("../../../assets/morphologies/walker2d.json"))
            .expect("shipped walker2d morphology is valid")
    }

    /// Four-link monoped: torso, thigh, shin, foot.
    pub fn hopper2d() -> Self {
        Self::from_json(include_str!("../../../assets/morphologies/hopper2d.json"))
            .expect("shipped hopper2d morphology is valid")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "walker2d" => Some(Self::walker2d()),
            "hopper2d" => Some(Self::hopper2d()),
            _ => None,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_feet(&self) -> usize {
        self.feet.len()
    }

    pub fn torque_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.torque_limit).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidMorphology(msg));
        let n = self.links.len();
        if n == 0 {
            return bad("no links".into());
        }
        if self.torso >= n {
            return bad(format!("torso index {} out of range", self.torso));
        }
        for l in &self.links {
            let fields = [l.length, l.mass, l.inertia, l.half_width];
            if fields.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return bad(format!("link '{}' needs positive length, mass, inertia and width", l.name));
            }
        }
        if self.joints.len() != n - 1 {
            return bad(format!("{} links need {} joints, found {}", n, n - 1, self.joints.len()));
        }
        let mut parent_of = vec![None; n];
        for j in &self.joints {
            if j.parent >= n || j.child >= n || j.parent == j.child {
                return bad(format!("joint '{}' has invalid link indices", j.name));
            }
            if j.child == self.torso {
                return bad(format!("joint '{}' makes the torso a child", j.name));
            }
            if parent_of[j.child].is_some() {
                return bad(format!("link {} has two parent joints", j.child));
            }
            parent_of[j.child] = Some(j.parent);
            if !(j.torque_limit.is_finite() && j.torque_limit > 0.0) {
                return bad(format!("joint '{}' needs a positive torque limit", j.name));
            }
            if !(j.limits[0] <= j.limits[1]) {
                return bad(format!("joint '{}' has inverted limits", j.name));
            }
            if j.stiffness < 0.0 || j.damping < 0.0 {
                return bad(format!("joint '{}' has negative passive gains", j.name));
            }
        }
        // every link must reach the torso without revisiting a link
        for start in 0..n {
            let mut cur = start;
            let mut hops = 0;
            while cur != self.torso {
                match parent_of[cur] {
                    Some(p) => cur = p,
                    None => return bad(format!("link {start} is not connected to the torso")),
                }
                hops += 1;
                if hops > n {
                    return bad("joint graph contains a cycle".into());
                }
            }
        }
        if self.feet.is_empty() {
            return bad("at least one foot link is required".into());
        }
        if self.feet.iter().any(|&f| f >= n) {
            return bad("foot index out of range".into());
        }
        Ok(())
    }
}

/// Simulator settings that are not part of the body description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub gravity: f64,
    /// Ground penalty spring, N/m per contact point.
    pub contact_stiffness: f64,
    /// Ground normal damper, N s/m per contact point.
    pub contact_damping: f64,
    pub friction_coeff: f64,
    /// Tangential damper used while a contact sticks, N s/m.
    pub friction_damping: f64,
    /// Fallen when root height drops below this fraction of the stand height.
    pub fall_height_frac: f64,
    /// Fallen when |torso angle| exceeds this, radians.
    pub max_tilt: f64,
    /// Uniform joint perturbation half-width applied by `reset`, radians.
    pub reset_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            contact_stiffness: 2.0e4,
            contact_damping: 200.0,
            friction_coeff: 1.0,
            friction_damping: 5.0e3,
            fall_height_frac: 0.5,
            max_tilt: 1.0,
            reset_noise: 0.005,
        }
    }
}

/// Joint torques in N m, one per joint in morphology order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action(pub Vec<f64>);

impl Action {
    pub fn zeros(n: usize) -> Self {
        Action(vec![0.0; n])
    }

    /// Maps a normalized command in `[-1, 1]^J` to torques.
    pub fn from_normalized(cmd: &[f64], limits: &[f64]) -> Self {
        Action(
            cmd.iter()
                .zip(limits)
                .map(|(c, l)| c.clamp(-1.0, 1.0) * l)
                .collect(),
        )
    }

    pub fn clamped(&self, limits: &[f64]) -> Self {
        Action(self.0.iter().zip(limits).map(|(t, l)| t.clamp(-l, *l)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub root_pos: [f64; 2],
    pub root_angle: f64,
    pub joint_angles: Vec<f64>,
    pub root_vel: [f64; 2],
    pub root_ang_vel: f64,
    pub joint_vels: Vec<f64>,
    pub foot_contact: Vec<bool>,
    pub foot_air_time: Vec<f64>,
    /// Speed of each foot's centre of mass, m/s.
    pub foot_speed: Vec<f64>,
    pub time: f64,
}

impl SimState {
    fn coords(&self) -> Vec<f64> {
        let mut q = Vec::with_capacity(ROOT_DOFS + self.joint_angles.len());
        q.extend_from_slice(&[self.root_pos[0], self.root_pos[1], self.root_angle]);
        q.extend_from_slice(&self.joint_angles);
        q
    }

    fn velocities(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(ROOT_DOFS + self.joint_vels.len());
        v.extend_from_slice(&[self.root_vel[0], self.root_vel[1], self.root_ang_vel]);
        v.extend_from_slice(&self.joint_vels);
        v
    }

    fn is_finite(&self) -> bool {
        self.coords().iter().chain(self.velocities().iter()).all(|v| v.is_finite())
    }
}

/// World pose of one link rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPose {
    pub center: [f64; 2],
    pub angle: f64,
    /// Half extents along the local x and y axes.
    pub half_extents: [f64; 2],
}

impl LinkPose {
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.angle.sin_cos();
        let [hx, hy] = self.half_extents;
        let mut out = [[0.0; 2]; 4];
        for (i, (sx, sy)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].iter().enumerate() {
            let lx = sx * hx;
            let ly = sy * hy;
            out[i] = [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly];
        }
        out
    }
}

#[inline]
fn rotate(angle: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

#[inline]
fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

#[inline]
fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Link angles, centres and joint pivots for one configuration.
struct Kinematics {
    angle: Vec<f64>,
    com: Vec<[f64; 2]>,
    /// Rotation centre of every angular dof; translational entries unused.
    pivot: Vec<[f64; 2]>,
}

/// Dense row-major square matrix helper for the small systems we solve.
struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    #[inline]
    fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.n + c] += v;
    }

    fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.data[r * self.n..(r + 1) * self.n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Cholesky factorisation of a symmetric positive definite matrix.
    fn cholesky(&self) -> Option<Cholesky> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.data[i * n + j];
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return None;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Some(Cholesky { n, l })
    }
}

struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, l) = (self.n, &self.l);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * x[k];
            }
            x[i] = sum / l[i * n + i];
        }
        x
    }
}

/// Compiled body model. Cheap to clone; holds no mutable simulation state.
#[derive(Debug, Clone)]
pub struct Simulator {
    morph: MorphologySpec,
    config: SimConfig,
    /// Joints in parent-before-child order.
    joint_order: Vec<usize>,
    /// Angular dofs affecting each link, root first.
    chains: Vec<Vec<usize>>,
    /// Joint whose child is the link; `None` for the torso.
    parent_joint: Vec<Option<usize>>,
    canonical_angles: Vec<f64>,
    stand_height: f64,
}

impl Simulator {
    pub fn new(morph: MorphologySpec, config: SimConfig) -> Result<Self, SimError> {
        morph.validate()?;
        let n = morph.links.len();
        let mut parent_joint = vec![None; n];
        for (ji, j) in morph.joints.iter().enumerate() {
            parent_joint[j.child] = Some(ji);
        }
        let mut joint_order = Vec::with_capacity(morph.joints.len());
        let mut frontier = vec![morph.torso];
        while let Some(link) = frontier.pop() {
            for (ji, j) in morph.joints.iter().enumerate() {
                if j.parent == link {
                    joint_order.push(ji);
                    frontier.push(j.child);
                }
            }
        }
        let mut chains = vec![Vec::new(); n];
        chains[morph.torso] = vec![2];
        for &ji in &joint_order {
            let j = &morph.joints[ji];
            let mut chain = chains[j.parent].clone();
            chain.push(ROOT_DOFS + ji);
            chains[j.child] = chain;
        }
        let canonical_angles: Vec<f64> =
            morph.joints.iter().map(|j| 0.0_f64.clamp(j.limits[0], j.limits[1])).collect();

        let mut sim = Self {
            morph,
            config,
            joint_order,
            chains,
            parent_joint,
            canonical_angles,
            stand_height: 0.0,
        };
        let mut q = vec![0.0; sim.num_dofs()];
        q[ROOT_DOFS..].copy_from_slice(&sim.canonical_angles);
        let kin = sim.kinematics(&q);
        let corners: Vec<f64> = (0..n).flat_map(|b| sim.pose_of(&kin, b).corners()).map(|c| c[1]).collect();
        let lowest = corners.iter().cloned().fold(f64::INFINITY, f64::min);
        // start pre-compressed so an evenly supported body is in static equilibrium
        let supporting = corners.iter().filter(|&&y| y - lowest < 1e-9).count();
        let total_mass: f64 = sim.morph.links.iter().map(|l| l.mass).sum();
        let sink = if sim.config.contact_stiffness > 0.0 {
            total_mass * sim.config.gravity / (supporting as f64 * sim.config.contact_stiffness)
        } else {
            0.0
        };
        sim.stand_height = -lowest - sink;
        Ok(sim)
    }

    pub fn morphology(&self) -> &MorphologySpec {
        &self.morph
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn num_dofs(&self) -> usize {
        ROOT_DOFS + self.morph.joints.len()
    }

    /// Torso height of the canonical pose resting on the contact springs.
    pub fn stand_height(&self) -> f64 {
        self.stand_height
    }

    pub fn fall_height(&self) -> f64 {
        self.config.fall_height_frac * self.stand_height
    }

    pub fn observation_dim(&self) -> usize {
        let j = self.morph.num_joints();
        3 + 2 * j + 3 + j + self.morph.num_feet()
    }

    /// Canonical standing pose plus a seeded joint perturbation of at most
    /// `reset_noise` radians. Velocities are zero and every foot is flagged in contact.
    pub fn reset(&self, seed: u64) -> SimState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.config.reset_noise;
        let joint_angles = self
            .morph
            .joints
            .iter()
            .zip(&self.canonical_angles)
            .map(|(j, &q0)| {
                let d = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                (q0 + d).clamp(j.limits[0], j.limits[1])
            })
            .collect();
        let nj = self.morph.num_joints();
        let nf = self.morph.num_feet();
        SimState {
            root_pos: [0.0, self.stand_height],
            root_angle: 0.0,
            joint_angles,
            root_vel: [0.0, 0.0],
            root_ang_vel: 0.0,
            joint_vels: vec![0.0; nj],
            foot_contact: vec![true; nf],
            foot_air_time: vec![0.0; nf],
            foot_speed: vec![0.0; nf],
            time: 0.0,
        }
    }

    fn kinematics(&self, q: &[f64]) -> Kinematics {
        let n = self.morph.links.len();
        let mut angle = vec![0.0; n];
        let mut com = vec![[0.0; 2]; n];
        let mut pivot = vec![[0.0; 2]; self.num_dofs()];
        let t = self.morph.torso;
        angle[t] = q[2];
        com[t] = [q[0], q[1]];
        pivot[2] = com[t];
        for &ji in &self.joint_order {
            let j = &self.morph.joints[ji];
            let pa = angle[j.parent];
            let ca = pa + j.angle_offset + q[ROOT_DOFS + ji];
            let p = rotate(pa, j.parent_anchor);
            let joint_pos = [com[j.parent][0] + p[0], com[j.parent][1] + p[1]];
            let c = rotate(ca, j.child_anchor);
            angle[j.child] = ca;
            com[j.child] = [joint_pos[0] - c[0], joint_pos[1] - c[1]];
            pivot[ROOT_DOFS + ji] = joint_pos;
        }
        Kinematics { angle, com, pivot }
    }

    fn pose_of(&self, kin: &Kinematics, link: usize) -> LinkPose {
        let l = &self.morph.links[link];
        LinkPose {
            center: kin.com[link],
            angle: kin.angle[link],
            half_extents: [l.half_width, 0.5 * l.length],
        }
    }

    /// World pose of every link, in morphology order.
    pub fn link_poses(&self, state: &SimState) -> Vec<LinkPose> {
        let kin = self.kinematics(&state.coords());
        (0..self.morph.links.len()).map(|b| self.pose_of(&kin, b)).collect()
    }

    /// Velocity of a point rigidly attached to `link`.
    fn point_velocity(&self, kin: &Kinematics, link: usize, p: [f64; 2], qd: &[f64]) -> [f64; 2] {
        let mut v = [qd[0], qd[1]];
        for &k in &self.chains[link] {
            let r = perp(sub(p, kin.pivot[k]));
            v[0] += r[0] * qd[k];
            v[1] += r[1] * qd[k];
        }
        v
    }

    /// Adds `J_p^T f` for a world force `f` applied at point `p` of `link`.
    fn apply_force(&self, kin: &Kinematics, link: usize, p: [f64; 2], f: [f64; 2], out: &mut [f64]) {
        out[0] += f[0];
        out[1] += f[1];
        for &k in &self.chains[link] {
            out[k] += dot(perp(sub(p, kin.pivot[k])), f);
        }
    }

    /// Adds `c * g g^T` where `g` is the generalized direction of the world
    /// vector `dir` applied at point `p` of `link`.
    fn add_damper(&self, kin: &Kinematics, link: usize, p: [f64; 2], dir: [f64; 2], c: f64, d: &mut SquareMatrix) {
        let mut g = vec![(0usize, 0.0); 0];
        g.push((0, dir[0]));
        g.push((1, dir[1]));
        for &k in &self.chains[link] {
            g.push((k, dot(perp(sub(p, kin.pivot[k])), dir)));
        }
        for &(r, gr) in &g {
            for &(col, gc) in &g {
                d.add(r, col, c * gr * gc);
            }
        }
    }

    fn mass_matrix(&self, kin: &Kinematics) -> SquareMatrix {
        let n = self.num_dofs();
        let mut m = SquareMatrix::zeros(n);
        for (b, link) in self.morph.links.iter().enumerate() {
            let chain = &self.chains[b];
            // translational columns: x, y, then rotational chain entries
            let mut cols: Vec<(usize, [f64; 2])> = vec![(0, [1.0, 0.0]), (1, [0.0, 1.0])];
            for &k in chain {
                cols.push((k, perp(sub(kin.com[b], kin.pivot[k]))));
            }
            for &(r, jr) in &cols {
                for &(c, jc) in &cols {
                    m.add(r, c, link.mass * dot(jr, jc));
                }
            }
            for &r in chain {
                for &c in chain {
                    m.add(r, c, link.inertia);
                }
            }
        }
        m
    }

    /// Partial derivative of kinetic energy with respect to `q`, holding `q'` fixed.
    fn kinetic_gradient(&self, kin: &Kinematics, qd: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.num_dofs()];
        for (b, link) in self.morph.links.iter().enumerate() {
            let chain = &self.chains[b];
            let v = self.point_velocity(kin, b, kin.com[b], qd);
            for (ki, &k) in chain.iter().enumerate() {
                let mut dv = [0.0; 2];
                for (li, &l) in chain.iter().enumerate() {
                    let deeper = chain[ki.max(li)];
                    let r = sub(kin.com[b], kin.pivot[deeper]);
                    dv[0] -= r[0] * qd[l];
                    dv[1] -= r[1] * qd[l];
                }
                g[k] += link.mass * dot(v, dv);
            }
        }
        g
    }

    /// Advances the state by `dt` seconds under the given joint torques.
    pub fn step(&self, state: &SimState, action: &Action, dt: f64) -> Result<SimState, SimError> {
        if !(dt > 0.0 && dt <= 0.01) {
            return Err(SimError::InvalidTimestep(dt));
        }
        let nj = self.morph.num_joints();
        if action.0.len() != nj {
            return Err(SimError::ActionDimension { expected: nj, got: action.0.len() });
        }
        if action.0.iter().any(|t| !t.is_finite()) {
            return Err(SimError::NonFiniteAction);
        }
        let cfg = &self.config;
        let n = self.num_dofs();
        let q = state.coords();
        let qd = state.velocities();
        let kin = self.kinematics(&q);
        let mass = self.mass_matrix(&kin);

        let mut forces = vec![0.0; n];
        let mut damping = SquareMatrix::zeros(n);

        for (b, link) in self.morph.links.iter().enumerate() {
            self.apply_force(&kin, b, kin.com[b], [0.0, -link.mass * cfg.gravity], &mut forces);
        }
        for (ji, j) in self.morph.joints.iter().enumerate() {
            let dof = ROOT_DOFS + ji;
            let torque = action.0[ji].clamp(-j.torque_limit, j.torque_limit);
            forces[dof] += torque - j.stiffness * (q[dof] - j.rest_angle);
            damping.add(dof, dof, j.damping);
        }
        for b in 0..self.morph.links.len() {
            for p in self.pose_of(&kin, b).corners() {
                let depth = -p[1];
                if depth <= 0.0 {
                    continue;
                }
                let v = self.point_velocity(&kin, b, p, &qd);
                let normal = cfg.contact_stiffness * depth - cfg.contact_damping * v[1];
                if normal <= 0.0 {
                    continue;
                }
                self.apply_force(&kin, b, p, [0.0, cfg.contact_stiffness * depth], &mut forces);
                self.add_damper(&kin, b, p, [0.0, 1.0], cfg.contact_damping, &mut damping);
                let cap = cfg.friction_coeff * normal;
                if cfg.friction_damping * v[0].abs() <= cap {
                    self.add_damper(&kin, b, p, [1.0, 0.0], cfg.friction_damping, &mut damping);
                } else {
                    self.apply_force(&kin, b, p, [-cap * v[0].signum(), 0.0], &mut forces);
                }
            }
        }

        let grad_t = self.kinetic_gradient(&kin, &qd);
        let momentum = mass.mul_vec(&qd);
        let rhs: Vec<f64> = (0..n).map(|i| momentum[i] + dt * (forces[i] + grad_t[i])).collect();
        let mut system = SquareMatrix { n, data: mass.data.clone() };
        for (a, d) in system.data.iter_mut().zip(&damping.data) {
            *a += dt * d;
        }
        let fail = SimError::NonFiniteState { time: state.time + dt };
        let vel_mid = system.cholesky().ok_or_else(|| fail.clone())?.solve(&rhs);
        let momentum_next = mass.mul_vec(&vel_mid);
        let mut q_next: Vec<f64> = q.iter().zip(&vel_mid).map(|(a, v)| a + dt * v).collect();
        // +1: pushing past the upper limit, -1: past the lower limit
        let mut at_limit = Vec::new();
        for (ji, j) in self.morph.joints.iter().enumerate() {
            let dof = ROOT_DOFS + ji;
            if q_next[dof] <= j.limits[0] {
                q_next[dof] = j.limits[0];
                at_limit.push((dof, -1.0));
            } else if q_next[dof] >= j.limits[1] {
                q_next[dof] = j.limits[1];
                at_limit.push((dof, 1.0));
            }
        }
        let kin_next = self.kinematics(&q_next);
        let factor = self.mass_matrix(&kin_next).cholesky().ok_or_else(|| fail.clone())?;
        let mut qd_next = factor.solve(&momentum_next);
        if !at_limit.is_empty() {
            self.resolve_limits(&factor, &at_limit, &mut qd_next);
        }
        let nf = self.morph.num_feet();
        let mut foot_contact = vec![false; nf];
        let mut foot_air_time = vec![0.0; nf];
        let mut foot_speed = vec![0.0; nf];
        for (fi, &link) in self.morph.feet.iter().enumerate() {
            let touching = self.pose_of(&kin_next, link).corners().iter().any(|c| c[1] < 0.0);
            foot_contact[fi] = touching;
            foot_air_time[fi] = if touching { 0.0 } else { state.foot_air_time[fi] + dt };
            let v = self.point_velocity(&kin_next, link, kin_next.com[link], &qd_next);
            let speed = dot(v, v).sqrt();
            foot_speed[fi] = if speed < FOOT_MOVING_EPS { 0.0 } else { speed };
        }

        let next = SimState {
            root_pos: [q_next[0], q_next[1]],
            root_angle: q_next[2],
            joint_angles: q_next[ROOT_DOFS..].to_vec(),
            root_vel: [qd_next[0], qd_next[1]],
            root_ang_vel: qd_next[2],
            joint_vels: qd_next[ROOT_DOFS..].to_vec(),
            foot_contact,
            foot_air_time,
            foot_speed,
            time: state.time + dt,
        };
        if !next.is_finite() {
            return Err(fail);
        }
        Ok(next)
    }

    /// Inelastic joint-limit impulses: removes any velocity driving a joint
    /// further past its limit by applying equal and opposite torques to the two
    /// links it connects (projected Gauss-Seidel over the active limits).
    fn resolve_limits(&self, factor: &Cholesky, active: &[(usize, f64)], qd: &mut [f64]) {
        let n = self.num_dofs();
        let columns: Vec<Vec<f64>> = active
            .iter()
            .map(|&(dof, _)| {
                let mut e = vec![0.0; n];
                e[dof] = 1.0;
                factor.solve(&e)
            })
            .collect();
        let mut impulse = vec![0.0; active.len()];
        for _ in 0..8 {
            for (i, &(dof, side)) in active.iter().enumerate() {
                let col = &columns[i];
                // side * lambda <= 0 keeps the impulse pushing back inside the range
                let unclamped = impulse[i] - qd[dof] / col[dof];
                let next = if side > 0.0 { unclamped.min(0.0) } else { unclamped.max(0.0) };
                let delta = next - impulse[i];
                if delta != 0.0 {
                    for (v, c) in qd.iter_mut().zip(col) {
                        *v += c * delta;
                    }
                    impulse[i] = next;
                }
            }
        }
    }

    /// Observation layout:
    ///
    /// | slice | content |
    /// |---|---|
    /// | 0 | root height |
    /// | 1..3 | sin, cos of torso angle |
    /// | 3..3+2J | sin, cos of each joint angle |
    /// | next 3 | root vx, vy, angular velocity |
    /// | next J | joint velocities |
    /// | last F | foot contact flags (0/1) |
    ///
    /// Root x is deliberately absent.
    pub fn observe(&self, state: &SimState) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.observation_dim());
        obs.push(state.root_pos[1]);
        obs.push(state.root_angle.sin());
        obs.push(state.root_angle.cos());
        for &a in &state.joint_angles {
            obs.push(a.sin());
            obs.push(a.cos());
        }
        obs.extend_from_slice(&[state.root_vel[0], state.root_vel[1], state.root_ang_vel]);
        obs.extend_from_slice(&state.joint_vels);
        obs.extend(state.foot_contact.iter().map(|&c| if c { 1.0 } else { 0.0 }));
        obs
    }

    pub fn is_fallen(&self, state: &SimState) -> bool {
        state.root_pos[1] < self.fall_height() || state.root_angle.abs() > self.config.max_tilt
    }

    /// Kinetic + gravitational + joint-spring + ground-spring energy.
    pub fn energy(&self, state: &SimState) -> f64 {
        let q = state.coords();
        let qd = state.velocities();
        let kin = self.kinematics(&q);
        let kinetic = 0.5 * dot_n(&qd, &self.mass_matrix(&kin).mul_vec(&qd));
        let gravity: f64 = self
            .morph
            .links
            .iter()
            .enumerate()
            .map(|(b, l)| l.mass * self.config.gravity * kin.com[b][1])
            .sum();
        let springs: f64 = self
            .morph
            .joints
            .iter()
            .enumerate()
            .map(|(ji, j)| 0.5 * j.stiffness * (q[ROOT_DOFS + ji] - j.rest_angle).powi(2))
            .sum();
        let ground: f64 = (0..self.morph.links.len())
            .flat_map(|b| self.pose_of(&kin, b).corners())
            .map(|c| if c[1] < 0.0 { 0.5 * self.config.contact_stiffness * c[1] * c[1] } else { 0.0 })
            .sum();
        kinetic + gravity + springs + ground
    }

    /// Total linear momentum of all links.
    pub fn linear_momentum(&self, state: &SimState) -> [f64; 2] {
        let q = state.coords();
        let qd = state.velocities();
        let kin = self.kinematics(&q);
        let mut p = [0.0; 2];
        for (b, l) in self.morph.links.iter().enumerate() {
            let v = self.point_velocity(&kin, b, kin.com[b], &qd);
            p[0] += l.mass * v[0];
            p[1] += l.mass * v[1];
        }
        p
    }

    /// Centre of mass of the whole body.
    pub fn center_of_mass(&self, state: &SimState) -> [f64; 2] {
        let kin = self.kinematics(&state.coords());
        let total: f64 = self.morph.links.iter().map(|l| l.mass).sum();
        let mut c = [0.0; 2];
        for (b, l) in self.morph.links.iter().enumerate() {
            c[0] += l.mass * kin.com[b][0] / total;
            c[1] += l.mass * kin.com[b][1] / total;
        }
        c
    }

    /// The link whose joint connects it to its parent, if any.
    pub fn parent_joint(&self, link: usize) -> Option<usize> {
        self.parent_joint[link]
    }
}

fn dot_n(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
