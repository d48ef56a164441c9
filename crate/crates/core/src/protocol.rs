//! Server→agent perceptor decoding and agent→server command encoding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::nao::{self, SpeedLimits, NUM_JOINTS};
use crate::sexpr::{self, SExpr, SexprError};

pub type Vec3 = [f64; 3];

/// Half-length of the field along x, metres.
pub const FIELD_HALF_LENGTH: f64 = 15.0;
/// Half-width of the field along y, metres.
pub const FIELD_HALF_WIDTH: f64 = 10.0;

pub const DEFAULT_SCENE: &str = "rsg/agent/nao/nao.rsg";
pub const DEFAULT_TEAM: &str = "RLTeam";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Parse(#[from] SexprError),
    #[error("malformed perceptor: {0}")]
    MalformedPerceptor(String),
    #[error("velocity {value} deg/s for joint {joint} exceeds its limit")]
    VelocityOutOfRange { joint: &'static str, value: f64 },
    #[error("uniform number {0} outside 1..=11")]
    InvalidUnum(u32),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("beam position ({x}, {y}) outside the field")]
    OutOfField { x: f64, y: f64 },
    #[error("unknown agent command: {0}")]
    UnknownCommand(String),
    #[error("malformed agent command: {0}")]
    MalformedCommand(String),
}

/// Planar field pose used by the beam command.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub rot_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FootForce {
    /// Contact point in the foot frame, metres.
    pub contact_point: Vec3,
    /// Newtons.
    pub force: Vec3,
}

/// One cycle of decoded sensor state.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptorSnapshot {
    pub sim_time: f64,
    /// Degrees, by joint index.
    pub joint_angles: [f64; NUM_JOINTS],
    /// Degrees per second.
    pub gyro: Vec3,
    /// m/s²; an upright robot reads about (0, 0, -9.8).
    pub accel: Vec3,
    pub left_foot: FootForce,
    pub right_foot: FootForce,
    /// Ball relative to the torso, metres.
    pub ball_rel: Option<Vec3>,
    /// Ground-truth ball position (training mode only).
    pub ball_world: Option<Vec3>,
    pub fallen_hint: Option<bool>,
    pub game_state: Option<String>,
}

impl Default for PerceptorSnapshot {
    fn default() -> Self {
        PerceptorSnapshot {
            sim_time: 0.0,
            joint_angles: [0.0; NUM_JOINTS],
            gyro: [0.0; 3],
            accel: [0.0; 3],
            left_foot: FootForce::default(),
            right_foot: FootForce::default(),
            ball_rel: None,
            ball_world: None,
            fallen_hint: None,
            game_state: None,
        }
    }
}

impl PerceptorSnapshot {
    pub fn summary(&self) -> String {
        let ball = match self.ball_world {
            Some([x, y, z]) => format!("({x:.3},{y:.3},{z:.3})"),
            None => "-".into(),
        };
        format!(
            "t={:.3} joints={} ball={} fallen={}",
            self.sim_time,
            NUM_JOINTS,
            ball,
            self.fallen_hint.unwrap_or(false)
        )
    }
}

fn malformed(e: &SExpr) -> ProtocolError {
    ProtocolError::MalformedPerceptor(e.to_string())
}

fn num(e: &SExpr) -> Option<f64> {
    e.as_str()?.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn nums<const N: usize>(items: &[SExpr]) -> Option<[f64; N]> {
    if items.len() != N {
        return None;
    }
    let mut out = [0.0; N];
    for (slot, item) in out.iter_mut().zip(items) {
        *slot = num(item)?;
    }
    Some(out)
}

fn field_nums<const N: usize>(e: &SExpr, name: &str) -> Result<[f64; N], ProtocolError> {
    e.field(name)
        .and_then(nums::<N>)
        .ok_or_else(|| malformed(e))
}

fn field_name<'a>(e: &'a SExpr, name: &str) -> Result<&'a str, ProtocolError> {
    match e.field(name) {
        Some([v]) => v.as_str().ok_or_else(|| malformed(e)),
        _ => Err(malformed(e)),
    }
}

/// Decodes one perceptor payload. Fields absent from this payload are taken
/// from `previous`, except foot forces, which the server only sends while a
/// foot touches the ground and therefore read as zero when absent.
pub fn decode_snapshot(
    payload: &[u8],
    previous: Option<&PerceptorSnapshot>,
) -> Result<PerceptorSnapshot, ProtocolError> {
    let exprs = sexpr::parse(payload)?;
    let mut snap = previous.cloned().unwrap_or_default();
    snap.left_foot = FootForce::default();
    snap.right_foot = FootForce::default();

    for e in &exprs {
        let Some(head) = e.head() else { continue };
        match head {
            "time" => snap.sim_time = field_nums::<1>(e, "now")?[0],
            "HJ" => {
                let name = field_name(e, "n")?;
                let [ax] = field_nums::<1>(e, "ax")?;
                if let Some(spec) = nao::by_perceptor(name) {
                    snap.joint_angles[spec.index] = ax;
                }
            }
            "GYR" => snap.gyro = field_nums::<3>(e, "rt")?,
            "ACC" => snap.accel = field_nums::<3>(e, "a")?,
            "FRP" => {
                let name = field_name(e, "n")?;
                let foot = FootForce {
                    contact_point: field_nums::<3>(e, "c")?,
                    force: field_nums::<3>(e, "f")?,
                };
                match name {
                    "lf" => snap.left_foot = foot,
                    "rf" => snap.right_foot = foot,
                    _ => {}
                }
            }
            "GTB" => snap.ball_world = Some(field_nums::<3>(e, "pos")?),
            "FALL" => {
                let [flag] = e
                    .as_list()
                    .and_then(|l| nums::<1>(&l[1..]))
                    .ok_or_else(|| malformed(e))?;
                snap.fallen_hint = Some(flag != 0.0);
            }
            "GS" => {
                if let Some(pm) = e.field("pm") {
                    let mode = pm
                        .first()
                        .and_then(SExpr::as_str)
                        .ok_or_else(|| malformed(e))?;
                    snap.game_state = Some(mode.to_string());
                }
            }
            "See" => {
                let ball = e
                    .as_list()
                    .into_iter()
                    .flatten()
                    .find(|c| c.head() == Some("B"));
                if let Some(ball) = ball {
                    let [d, h, v] = field_nums::<3>(ball, "pol")?;
                    snap.ball_rel = Some(polar_to_cartesian(d, h, v));
                }
            }
            // hear, vision of other objects, touch sensors and the rest are
            // accepted and ignored
            _ => {}
        }
    }
    Ok(snap)
}

/// Distance and horizontal/vertical angles in degrees → Cartesian.
pub fn polar_to_cartesian(dist: f64, horiz_deg: f64, vert_deg: f64) -> Vec3 {
    let (h, v) = (horiz_deg.to_radians(), vert_deg.to_radians());
    [
        dist * v.cos() * h.cos(),
        dist * v.cos() * h.sin(),
        dist * v.sin(),
    ]
}

pub fn cartesian_to_polar(p: Vec3) -> Vec3 {
    let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if d == 0.0 {
        return [0.0; 3];
    }
    [
        d,
        p[1].atan2(p[0]).to_degrees(),
        (p[2] / d).asin().to_degrees(),
    ]
}

fn fmt_vec(out: &mut String, v: Vec3) {
    let _ = write!(out, "{:.6} {:.6} {:.6}", v[0], v[1], v[2]);
}

/// Encodes a snapshot in the server's perceptor dialect. Used by the mock
/// simulator; numbers carry six decimals.
pub fn encode_perceptors(snap: &PerceptorSnapshot) -> Vec<u8> {
    let mut out = String::with_capacity(1024);
    let _ = write!(out, "(time (now {:.6}))", snap.sim_time);
    if let Some(gs) = &snap.game_state {
        let _ = write!(out, "(GS (t {:.6}) (pm {gs}))", snap.sim_time);
    }
    out.push_str("(GYR (n torso) (rt ");
    fmt_vec(&mut out, snap.gyro);
    out.push_str("))(ACC (n torso) (a ");
    fmt_vec(&mut out, snap.accel);
    out.push_str("))");
    for (name, foot) in [("lf", &snap.left_foot), ("rf", &snap.right_foot)] {
        if foot.force != [0.0; 3] {
            let _ = write!(out, "(FRP (n {name}) (c ");
            fmt_vec(&mut out, foot.contact_point);
            out.push_str(") (f ");
            fmt_vec(&mut out, foot.force);
            out.push_str("))");
        }
    }
    if let Some(ball) = snap.ball_rel {
        out.push_str("(See (B (pol ");
        fmt_vec(&mut out, cartesian_to_polar(ball));
        out.push_str(")))");
    }
    for spec in nao::registry() {
        let _ = write!(
            out,
            "(HJ (n {}) (ax {:.6}))",
            spec.perceptor_name, snap.joint_angles[spec.index]
        );
    }
    if let Some(ball) = snap.ball_world {
        out.push_str("(GTB (pos ");
        fmt_vec(&mut out, ball);
        out.push_str("))");
    }
    if let Some(fallen) = snap.fallen_hint {
        let _ = write!(out, "(FALL {})", u8::from(fallen));
    }
    out.into_bytes()
}

/// Commanded joint velocities for one cycle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EffectorBatch {
    /// Joint index → degrees per second.
    pub velocities: BTreeMap<usize, f64>,
    pub sync: bool,
}

impl EffectorBatch {
    pub fn new(sync: bool) -> Self {
        EffectorBatch {
            velocities: BTreeMap::new(),
            sync,
        }
    }

    pub fn set(&mut self, joint: usize, deg_per_s: f64) -> &mut Self {
        self.velocities.insert(joint, deg_per_s);
        self
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }
}

/// Encodes a batch against the registry's default speed caps.
pub fn encode_effectors(batch: &EffectorBatch) -> Result<Vec<u8>, ProtocolError> {
    encode_effectors_with(batch, &SpeedLimits::default())
}

pub fn encode_effectors_with(
    batch: &EffectorBatch,
    limits: &SpeedLimits,
) -> Result<Vec<u8>, ProtocolError> {
    let mut out = String::with_capacity(batch.len() * 16 + 5);
    for (&joint, &v) in &batch.velocities {
        let spec = &nao::registry()[joint];
        if !v.is_finite() || v.abs() > limits.get(joint) {
            return Err(ProtocolError::VelocityOutOfRange {
                joint: spec.effector_name,
                value: v,
            });
        }
        // adding 0.0 folds -0.0 into 0.0
        let _ = write!(out, "({} {:.5})", spec.effector_name, v + 0.0);
    }
    if batch.sync {
        out.push_str("(syn)");
    }
    Ok(out.into_bytes())
}

fn sanitize_name(text: &str) -> Result<String, ProtocolError> {
    let cleaned: String = text
        .trim()
        .chars()
        .map(|c| {
            if c.is_whitespace() || c == '(' || c == ')' || c == '\0' {
                '_'
            } else {
                c
            }
        })
        .collect();
    if cleaned.is_empty() {
        return Err(ProtocolError::InvalidName(text.to_string()));
    }
    Ok(cleaned)
}

/// The handshake: scene message, then init with uniform number and team.
pub fn encode_init(scene_path: &str, team: &str, unum: u32) -> Result<Vec<Vec<u8>>, ProtocolError> {
    if !(1..=11).contains(&unum) {
        return Err(ProtocolError::InvalidUnum(unum));
    }
    if sexpr::Atom::new(scene_path).is_err() {
        return Err(ProtocolError::InvalidName(scene_path.to_string()));
    }
    let team = sanitize_name(team)?;
    Ok(vec![
        format!("(scene {scene_path})").into_bytes(),
        format!("(init (unum {unum})(teamname {team}))").into_bytes(),
    ])
}

/// Shortest decimal that round-trips, with `-0` folded to `0`.
fn fmt_num(v: f64) -> String {
    format!("{}", v + 0.0)
}

pub fn encode_beam(x: f64, y: f64, rot_deg: f64) -> Result<Vec<u8>, ProtocolError> {
    let in_field =
        x.abs() <= FIELD_HALF_LENGTH && y.abs() <= FIELD_HALF_WIDTH && rot_deg.is_finite();
    if !in_field {
        return Err(ProtocolError::OutOfField { x, y });
    }
    Ok(format!("(beam {} {} {})", fmt_num(x), fmt_num(y), fmt_num(rot_deg)).into_bytes())
}

/// Training command that places the ball. Sent on the monitor socket of a
/// real server; the mock simulator also accepts it inline on the agent socket.
pub fn encode_ball_placement(pos: Vec3, vel: Vec3) -> Vec<u8> {
    let mut out = String::from("(ball (pos ");
    out.push_str(&pos.map(fmt_num).join(" "));
    out.push_str(") (vel ");
    out.push_str(&vel.map(fmt_num).join(" "));
    out.push_str("))");
    out.into_bytes()
}

/// A decoded agent→server command.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentCommand {
    Scene(String),
    Init { unum: u32, team: String },
    Beam { x: f64, y: f64, rot: f64 },
    PlaceBall { pos: Vec3, vel: Vec3 },
    Velocity { joint: usize, deg_per_s: f64 },
    Sync,
}

pub fn parse_agent_commands(payload: &[u8]) -> Result<Vec<AgentCommand>, ProtocolError> {
    let exprs = sexpr::parse(payload)?;
    validate_agent_commands(&exprs)
}

/// Checks agent-side expressions: every one must be a known command with
/// well-formed arguments, and joint velocities must respect the default caps.
pub fn validate_agent_commands(exprs: &[SExpr]) -> Result<Vec<AgentCommand>, ProtocolError> {
    let limits = SpeedLimits::default();
    let bad = |e: &SExpr| ProtocolError::MalformedCommand(e.to_string());
    let mut out = Vec::with_capacity(exprs.len());
    for e in exprs {
        let items = e
            .as_list()
            .ok_or_else(|| ProtocolError::UnknownCommand(e.to_string()))?;
        let head = e
            .head()
            .ok_or_else(|| ProtocolError::UnknownCommand(e.to_string()))?;
        let args = &items[1..];
        let cmd = match head {
            "syn" if args.is_empty() => AgentCommand::Sync,
            "scene" => match args {
                [path] => AgentCommand::Scene(path.as_str().ok_or_else(|| bad(e))?.to_string()),
                _ => return Err(bad(e)),
            },
            "init" => {
                let unum = e
                    .field("unum")
                    .and_then(nums::<1>)
                    .map(|[u]| u)
                    .filter(|u| u.fract() == 0.0 && (1.0..=11.0).contains(u))
                    .ok_or_else(|| bad(e))? as u32;
                let team = match e.field("teamname") {
                    Some([t]) => t.as_str().ok_or_else(|| bad(e))?.to_string(),
                    _ => return Err(bad(e)),
                };
                AgentCommand::Init { unum, team }
            }
            "beam" => {
                let [x, y, rot] = nums::<3>(args).ok_or_else(|| bad(e))?;
                AgentCommand::Beam { x, y, rot }
            }
            "ball" => {
                let pos = e.field("pos").and_then(nums::<3>).ok_or_else(|| bad(e))?;
                let vel = match e.field("vel") {
                    Some(v) => nums::<3>(v).ok_or_else(|| bad(e))?,
                    None => [0.0; 3],
                };
                AgentCommand::PlaceBall { pos, vel }
            }
            name => {
                let spec = nao::by_effector(name)
                    .ok_or_else(|| ProtocolError::UnknownCommand(e.to_string()))?;
                let [v] = nums::<1>(args).ok_or_else(|| bad(e))?;
                if v.abs() > limits.get(spec.index) {
                    return Err(ProtocolError::VelocityOutOfRange {
                        joint: spec.effector_name,
                        value: v,
                    });
                }
                AgentCommand::Velocity {
                    joint: spec.index,
                    deg_per_s: v,
                }
            }
        };
        out.push(cmd);
    }
    Ok(out)
}
