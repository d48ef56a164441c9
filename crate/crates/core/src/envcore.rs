//! Single-agent episodic environment on top of a simulation server.
//!
//! `reset` connects a fresh agent, beams it, places the ball and consumes one
//! snapshot. `step` sends one effector batch with sync, decodes the reply and
//! asks the task for a reward. When the episode ends the wait phase runs
//! before the final reward is computed.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use log::debug;
use thiserror::Error;

use crate::mockserver::{CYCLE, TORSO_HEIGHT};
use crate::nao::{self, default_controllable, JointSet, SpeedLimits};
use crate::protocol::{self, EffectorBatch, PerceptorSnapshot, Pose, ProtocolError, Vec3};
use crate::tasks::{EpisodeView, Task};
use crate::trace::TraceTap;
use crate::wire::{self, Connection, ServerHandle, ServerKind, ServerOptions, WireError};

pub const ANGLE_SCALE: f64 = 180.0;
pub const POSITION_SCALE: f64 = 10.0;
pub const FORCE_SCALE: f64 = 50.0;
pub const ACCEL_SCALE: f64 = 20.0;
pub const GYRO_SCALE: f64 = 500.0;

/// Low-pass factor of the fall detector.
pub const FALL_EMA_ALPHA: f64 = 0.5;
pub const FALL_ANGLE_DEG: f64 = 75.0;
pub const FALL_CYCLES: usize = 10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("episode finished; call reset first")]
    EpisodeFinished,
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("handshake timed out: {0}")]
    HandshakeTimeout(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ActionMode {
    #[default]
    Velocity,
    TargetAngle,
    TargetAngleWithSpeed,
}

impl ActionMode {
    /// Action vector length for `joints` controllable joints.
    pub fn action_dim(self, joints: usize) -> usize {
        match self {
            ActionMode::TargetAngleWithSpeed => 2 * joints,
            _ => joints,
        }
    }
}

impl FromStr for ActionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "velocity" => Ok(ActionMode::Velocity),
            "target_angle" => Ok(ActionMode::TargetAngle),
            "target_angle_with_speed" => Ok(ActionMode::TargetAngleWithSpeed),
            _ => Err(format!(
                "unknown action mode {s:?} (expected velocity, target_angle, target_angle_with_speed)"
            )),
        }
    }
}

impl fmt::Display for ActionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionMode::Velocity => "velocity",
            ActionMode::TargetAngle => "target_angle",
            ActionMode::TargetAngleWithSpeed => "target_angle_with_speed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub kind: ServerKind,
    pub host: String,
    /// Agent port; 0 picks a free one.
    pub base_port: u16,
    pub binary_path: Option<PathBuf>,
    pub extra_args: Vec<String>,
    pub startup_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            kind: ServerKind::SpawnedMock,
            host: "127.0.0.1".into(),
            base_port: 0,
            binary_path: None,
            extra_args: Vec::new(),
            startup_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub controllable: JointSet,
    pub action_mode: ActionMode,
    pub max_episode_steps: usize,
    /// Wait cycles after the episode ends; `None` uses the task's default.
    pub n_wait: Option<usize>,
    pub ball_start_pos: Vec3,
    pub beam_pose: Pose,
    pub obs_clip: f64,
    /// Proportional gain of the target-angle modes, 1/s.
    pub target_gain: f64,
    pub speed_limits: SpeedLimits,
    pub server: ServerConfig,
    pub seed: u64,
    pub scene: String,
    pub team: String,
    pub unum: u32,
    pub io_timeout: Duration,
    /// Accelerometer reading of an upright robot; `None` picks the
    /// convention of the server kind.
    pub upright_accel: Option<Vec3>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            controllable: default_controllable(),
            action_mode: ActionMode::Velocity,
            max_episode_steps: 100,
            n_wait: None,
            ball_start_pos: [0.2, 0.0, 0.042],
            // right toe lined up behind the ball
            beam_pose: Pose {
                x: 0.0,
                y: 0.055,
                rot_deg: 0.0,
            },
            obs_clip: 1.0,
            target_gain: 10.0,
            speed_limits: SpeedLimits::default(),
            server: ServerConfig::default(),
            seed: 0,
            scene: protocol::DEFAULT_SCENE.into(),
            team: protocol::DEFAULT_TEAM.into(),
            unum: 1,
            io_timeout: Duration::from_secs(10),
            upright_accel: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.controllable.is_empty() {
            return bad("no controllable joints".into());
        }
        if self.max_episode_steps < 1 {
            return bad("max_episode_steps must be at least 1".into());
        }
        if !(self.obs_clip > 0.0 && self.obs_clip.is_finite()) {
            return bad(format!("obs_clip must be positive, got {}", self.obs_clip));
        }
        if !(self.target_gain > 0.0 && self.target_gain.is_finite()) {
            return bad(format!(
                "target_gain must be positive, got {}",
                self.target_gain
            ));
        }
        for spec in nao::registry() {
            let cap = self.speed_limits.get(spec.index);
            if !(cap > 0.0 && cap <= spec.max_speed) {
                return bad(format!(
                    "speed limit {cap} for {} outside (0, {}]",
                    spec.perceptor_name, spec.max_speed
                ));
            }
        }
        if self.ball_start_pos.iter().any(|v| !v.is_finite()) {
            return bad("ball_start_pos must be finite".into());
        }
        protocol::encode_beam(self.beam_pose.x, self.beam_pose.y, self.beam_pose.rot_deg)?;
        protocol::encode_init(&self.scene, &self.team, self.unum)?;
        if self.io_timeout.is_zero() {
            return bad("io_timeout must be positive".into());
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        2 * self.controllable.len() + 21
    }

    pub fn act_dim(&self) -> usize {
        self.action_mode.action_dim(self.controllable.len())
    }

    pub fn upright_reference(&self) -> Vec3 {
        self.upright_accel.unwrap_or(match self.server.kind {
            ServerKind::SpawnedMock => [0.0, 0.0, -crate::mockserver::GRAVITY],
            // rcssserver3d reports the reaction to gravity
            _ => [0.0, 0.0, 9.81],
        })
    }
}

/// Converts a policy action into joint velocity commands. Entries are
/// clipped to [−1, 1]; NaN counts as 0.
pub fn map_action(
    action: &[f64],
    mode: ActionMode,
    snapshot: &PerceptorSnapshot,
    joints: &JointSet,
    limits: &SpeedLimits,
    gain: f64,
) -> Result<EffectorBatch, EnvError> {
    let n = joints.len();
    let expected = mode.action_dim(n);
    if action.len() != expected {
        return Err(EnvError::DimensionMismatch {
            expected,
            got: action.len(),
        });
    }
    let a = |i: usize| {
        let v = action[i];
        if v.is_nan() {
            0.0
        } else {
            v.clamp(-1.0, 1.0)
        }
    };
    let mut batch = EffectorBatch::new(true);
    for (k, spec) in joints.specs().enumerate() {
        let max = limits.get(spec.index);
        let v = match mode {
            ActionMode::Velocity => a(k) * max,
            ActionMode::TargetAngle | ActionMode::TargetAngleWithSpeed => {
                let cap = if mode == ActionMode::TargetAngle {
                    max
                } else {
                    a(n + k).abs() * max
                };
                let target =
                    spec.min_angle + (spec.max_angle - spec.min_angle) * (a(k) + 1.0) / 2.0;
                let err = target - snapshot.joint_angles[spec.index];
                (gain * err).clamp(-cap, cap)
            }
        };
        batch.set(spec.index, v);
    }
    Ok(batch)
}

/// Flat observation: angles, angular velocities, ball, foot forces, accel,
/// gyro; each scaled and clipped to ±`config.obs_clip`.
pub fn build_observation(
    snapshot: &PerceptorSnapshot,
    previous: Option<&PerceptorSnapshot>,
    config: &EnvConfig,
) -> Vec<f64> {
    let clip = config.obs_clip;
    let mut obs = Vec::with_capacity(config.obs_dim());
    let mut push = |v: f64, scale: f64| obs.push((v / scale).clamp(-clip, clip));
    for spec in config.controllable.specs() {
        push(snapshot.joint_angles[spec.index], ANGLE_SCALE);
    }
    for spec in config.controllable.specs() {
        let vel = match previous {
            Some(p) => (snapshot.joint_angles[spec.index] - p.joint_angles[spec.index]) / CYCLE,
            None => 0.0,
        };
        push(vel, config.speed_limits.get(spec.index));
    }
    for v in snapshot.ball_rel.unwrap_or([0.0; 3]) {
        push(v, POSITION_SCALE);
    }
    for foot in [&snapshot.left_foot, &snapshot.right_foot] {
        for v in foot.contact_point {
            push(v, POSITION_SCALE);
        }
        for v in foot.force {
            push(v, FORCE_SCALE);
        }
    }
    for v in snapshot.accel {
        push(v, ACCEL_SCALE);
    }
    for v in snapshot.gyro {
        push(v, GYRO_SCALE);
    }
    obs
}

/// Fall detection from the accelerometer: the low-passed reading must point
/// more than 75° away from the upright reference for 10 cycles in a row. A
/// fallen hint from the server short-circuits.
#[derive(Debug, Clone, PartialEq)]
pub struct FallDetector {
    upright: Vec3,
    ema: Option<Vec3>,
    run: usize,
}

impl FallDetector {
    pub fn new(upright: Vec3) -> Self {
        FallDetector {
            upright,
            ema: None,
            run: 0,
        }
    }

    pub fn update(&mut self, snap: &PerceptorSnapshot) -> bool {
        let ema = match self.ema {
            None => snap.accel,
            Some(e) => std::array::from_fn(|k| {
                FALL_EMA_ALPHA * snap.accel[k] + (1.0 - FALL_EMA_ALPHA) * e[k]
            }),
        };
        self.ema = Some(ema);
        if angle_deg(ema, self.upright) > FALL_ANGLE_DEG {
            self.run += 1;
        } else {
            self.run = 0;
        }
        snap.fallen_hint == Some(true) || self.run >= FALL_CYCLES
    }
}

fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if na == 0.0 || nb == 0.0 {
        // free fall or no reading: no direction to compare
        return 0.0;
    }
    let c = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Runs a fresh detector over `history` and reports the final verdict.
pub fn detect_fall(history: &[PerceptorSnapshot], upright: Vec3) -> bool {
    let mut d = FallDetector::new(upright);
    history.iter().fold(false, |_, s| d.update(s))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepInfo {
    pub sim_time: f64,
    /// Ground truth when the server provides it, otherwise estimated from
    /// the relative ball position and the beam pose.
    pub ball_world: Option<Vec3>,
    pub fallen: bool,
    pub episode_steps: usize,
    /// Zero-velocity cycles run after this step.
    pub wait_cycles: usize,
    /// Final observation of an episode that a vectorised env auto-reset.
    pub terminal_observation: Option<Vec<f64>>,
    pub terminal_info: Option<Box<StepInfo>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Running,
    Finished,
}

pub struct Env {
    config: EnvConfig,
    task: Arc<dyn Task>,
    n_wait: usize,
    server: ServerHandle,
    conn: Option<Connection>,
    monitor: Option<Connection>,
    tap: Option<TraceTap>,
    history: Vec<PerceptorSnapshot>,
    fall: FallDetector,
    phase: Phase,
    steps: usize,
    reset_time: f64,
    ball_start: Vec3,
    episodes: u64,
}

impl fmt::Debug for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Env")
            .field("task", &self.task.name())
            .field("server", &self.server)
            .field("steps", &self.steps)
            .finish()
    }
}

impl Env {
    /// Validates `config` and starts (or locates) the server. No connection
    /// is made until `reset`.
    pub fn new(config: EnvConfig, task: Arc<dyn Task>) -> Result<Self, EnvError> {
        config.validate()?;
        let port = match config.server.base_port {
            0 => wire::auto_base_port(1)?,
            p => p,
        };
        let opts = ServerOptions {
            host: config.server.host.clone(),
            binary_path: config.server.binary_path.clone(),
            extra_args: config.server.extra_args.clone(),
            startup_timeout: config.server.startup_timeout,
            seed: config.seed,
        };
        let server = wire::spawn_server(config.server.kind, port, &opts)?;
        let n_wait = config.n_wait.unwrap_or_else(|| task.default_n_wait());
        Ok(Env {
            fall: FallDetector::new(config.upright_reference()),
            config,
            task,
            n_wait,
            server,
            conn: None,
            monitor: None,
            tap: None,
            history: Vec::new(),
            phase: Phase::Idle,
            steps: 0,
            reset_time: 0.0,
            ball_start: [0.0; 3],
            episodes: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn task(&self) -> &Arc<dyn Task> {
        &self.task
    }

    pub fn n_wait(&self) -> usize {
        self.n_wait
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.config.act_dim()
    }

    pub fn agent_port(&self) -> u16 {
        self.server.agent_port
    }

    pub fn server(&self) -> &ServerHandle {
        &self.server
    }

    /// Snapshots of the current episode, wait phase included.
    pub fn history(&self) -> &[PerceptorSnapshot] {
        &self.history
    }

    /// Sim time of the snapshot consumed by the last reset.
    pub fn reset_time(&self) -> f64 {
        self.reset_time
    }

    /// Records all traffic on this env's connections from now on.
    pub fn set_trace_tap(&mut self, tap: Option<TraceTap>) {
        if let Some(c) = self.conn.as_mut() {
            c.set_tap(tap.clone());
        }
        self.tap = tap;
    }

    /// Starts a fresh episode on a new agent connection.
    pub fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        self.drop_connection();
        self.phase = Phase::Idle;
        let cfg = &self.config;
        let host = cfg.server.host.clone();
        let mut conn =
            Connection::connect(&host, self.server.agent_port, cfg.server.startup_timeout)?;
        conn.set_read_timeout(Some(cfg.io_timeout))?;
        conn.set_tap(self.tap.clone());

        for msg in protocol::encode_init(&cfg.scene, &cfg.team, cfg.unum)? {
            conn.send(&msg)?;
        }
        let beam = cfg.beam_pose;
        conn.send(&protocol::encode_beam(beam.x, beam.y, beam.rot_deg)?)?;
        let ball = protocol::encode_ball_placement(cfg.ball_start_pos, [0.0; 3]);
        if self.server.kind == ServerKind::SpawnedMock {
            conn.send(&ball)?;
        } else {
            self.monitor_send(&ball)?;
        }
        conn.send(b"(syn)")?;
        let payload = conn.recv().map_err(|e| match e {
            WireError::Timeout(m) => EnvError::HandshakeTimeout(m),
            other => other.into(),
        })?;
        if let Some(tap) = &self.tap {
            let _ = tap.flush();
        }
        let mut snap = protocol::decode_snapshot(&payload, None)?;
        self.fill_ball_world(&mut snap);

        self.conn = Some(conn);
        self.fall = FallDetector::new(self.config.upright_reference());
        self.fall.update(&snap);
        self.reset_time = snap.sim_time;
        self.ball_start = snap.ball_world.unwrap_or(self.config.ball_start_pos);
        let obs = build_observation(&snap, None, &self.config);
        self.history.clear();
        self.history.push(snap);
        self.steps = 0;
        self.episodes += 1;
        self.phase = Phase::Running;
        debug!(
            "env on port {} reset (episode {})",
            self.server.agent_port, self.episodes
        );
        Ok(obs)
    }

    fn monitor_send(&mut self, payload: &[u8]) -> Result<(), EnvError> {
        if self.monitor.is_none() {
            let mut m = Connection::connect(
                &self.config.server.host,
                self.server.monitor_port,
                self.config.server.startup_timeout,
            )?;
            m.set_tap(self.tap.clone());
            self.monitor = Some(m);
        }
        self.monitor.as_mut().unwrap().send(payload)?;
        Ok(())
    }

    fn fill_ball_world(&self, snap: &mut PerceptorSnapshot) {
        if snap.ball_world.is_some() {
            return;
        }
        if let Some(rel) = snap.ball_rel {
            let p = self.config.beam_pose;
            let (s, c) = p.rot_deg.to_radians().sin_cos();
            snap.ball_world = Some([
                p.x + c * rel[0] - s * rel[1],
                p.y + s * rel[0] + c * rel[1],
                rel[2] + TORSO_HEIGHT,
            ]);
        }
    }

    fn cycle(&mut self, batch: &EffectorBatch) -> Result<PerceptorSnapshot, EnvError> {
        let payload = protocol::encode_effectors_with(batch, &self.config.speed_limits)?;
        let conn = self.conn.as_mut().ok_or(EnvError::EpisodeFinished)?;
        conn.send(&payload)?;
        let reply = conn.recv()?;
        let mut snap = protocol::decode_snapshot(&reply, self.history.last())?;
        self.fill_ball_world(&mut snap);
        Ok(snap)
    }

    fn view(&self, completed: bool) -> EpisodeView<'_> {
        EpisodeView {
            history: &self.history,
            completed,
            ball_start: self.ball_start,
            steps: self.steps,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.phase != Phase::Running {
            return Err(EnvError::EpisodeFinished);
        }
        let last = self.history.last().expect("history after reset");
        let batch = map_action(
            action,
            self.config.action_mode,
            last,
            &self.config.controllable,
            &self.config.speed_limits,
            self.config.target_gain,
        )?;
        let snap = match self.cycle(&batch) {
            Ok(s) => s,
            Err(e) => {
                self.phase = Phase::Finished;
                self.drop_connection();
                return Err(e);
            }
        };
        let observation = build_observation(&snap, self.history.last(), &self.config);
        let fallen = self.fall.update(&snap);
        self.history.push(snap);
        self.steps += 1;

        let terminated = fallen || self.task.is_terminated(&self.view(false));
        let truncated = !terminated && self.steps >= self.config.max_episode_steps;
        let mut wait_cycles = 0;
        let reward = if terminated || truncated {
            self.phase = Phase::Finished;
            let mut idle = EffectorBatch::new(true);
            for &j in self.config.controllable.indices() {
                idle.set(j, 0.0);
            }
            for _ in 0..self.n_wait {
                let s = self.cycle(&idle)?;
                self.history.push(s);
                wait_cycles += 1;
            }
            self.task.reward(&self.view(true))
        } else {
            self.task.reward(&self.view(false))
        };
        let last = self.history.last().unwrap();
        Ok(StepResult {
            observation,
            reward,
            terminated,
            truncated,
            info: StepInfo {
                sim_time: last.sim_time,
                ball_world: last.ball_world,
                fallen,
                episode_steps: self.steps,
                wait_cycles,
                terminal_observation: None,
                terminal_info: None,
            },
        })
    }

    fn drop_connection(&mut self) {
        if let Some(c) = self.conn.take() {
            c.shutdown();
        }
    }

    /// Disconnects and stops the server if this env started it.
    pub fn close(&mut self) {
        self.drop_connection();
        if let Some(m) = self.monitor.take() {
            m.shutdown();
        }
        if let Some(tap) = &self.tap {
            let _ = tap.flush();
        }
        self.phase = Phase::Finished;
        self.server.close();
    }
}

impl Drop for Env {
    fn drop(&mut self) {
        self.close();
    }
}
