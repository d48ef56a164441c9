//! Deterministic stand-in for `rcssserver3d`.
//!
//! Speaks the same framing, handshake, perceptor and effector dialect as the
//! real server, with just enough kinematics to exercise kicking tasks: the
//! pelvis is pinned at the beam pose, each leg is a three-link planar chain
//! (hip pitch, knee pitch, ankle pitch) and the ball is a point that picks up
//! a fraction of the foot's velocity on contact and then rolls to rest.
//! It is not a physics replacement.

use std::io;
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nao::{self, NUM_JOINTS};
use crate::protocol::{
    self, AgentCommand, EffectorBatch, FootForce, PerceptorSnapshot, Pose, Vec3,
};
use crate::wire::{self, WireError};

/// Seconds per simulation cycle.
pub const CYCLE: f64 = 0.02;
pub const BALL_RADIUS: f64 = 0.042;
pub const THIGH_LENGTH: f64 = 0.12;
pub const SHIN_LENGTH: f64 = 0.10;
pub const FOOT_LENGTH: f64 = 0.05;
pub const HIP_LATERAL_OFFSET: f64 = 0.055;
/// Hip joint height above the ground; the ankle rests 4 cm up when standing.
pub const HIP_HEIGHT: f64 = 0.26;
pub const TORSO_HEIGHT: f64 = 0.30;
pub const CONTACT_DISTANCE: f64 = 0.08;
pub const RESTITUTION: f64 = 0.8;
/// Rolling deceleration, m/s².
pub const ROLLING_FRICTION: f64 = 0.4;
pub const FALL_HIP_PITCH: f64 = 60.0;
pub const FALL_HIP_ROLL: f64 = 45.0;
pub const GRAVITY: f64 = 9.8;
const ROBOT_WEIGHT_N: f64 = 45.0;
const INIT_NOISE_DEG: f64 = 0.5;
const SOLE_TOLERANCE: f64 = 1e-3;

/// Leg joints of the planar chain: (hip roll, hip pitch, knee, ankle pitch).
#[derive(Debug, Clone, Copy)]
struct Leg {
    hip_roll: usize,
    hip_pitch: usize,
    knee: usize,
    ankle: usize,
    lateral: f64,
}

fn legs() -> [Leg; 2] {
    let j = |n: &str| nao::by_perceptor(n).expect("leg joint").index;
    [
        Leg {
            hip_roll: j("llj2"),
            hip_pitch: j("llj3"),
            knee: j("llj4"),
            ankle: j("llj5"),
            lateral: HIP_LATERAL_OFFSET,
        },
        Leg {
            hip_roll: j("rlj2"),
            hip_pitch: j("rlj3"),
            knee: j("rlj4"),
            ankle: j("rlj5"),
            lateral: -HIP_LATERAL_OFFSET,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockState {
    pub sim_time: f64,
    /// Degrees.
    pub joint_angles: [f64; NUM_JOINTS],
    /// Realised angular velocity over the last cycle, deg/s.
    pub joint_velocities: [f64; NUM_JOINTS],
    /// Last commanded velocity per joint; persists until overwritten.
    pub commanded: [f64; NUM_JOINTS],
    pub pelvis: Pose,
    /// Toe tips in world coordinates, [left, right].
    pub feet: [Vec3; 2],
    pub foot_velocity: [Vec3; 2],
    /// Sole height (lowest of ankle and toe), [left, right].
    pub sole_height: [f64; 2],
    pub ball_pos: Vec3,
    pub ball_vel: Vec3,
    pub fallen: bool,
    pub seed: u64,
}

impl MockState {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut joint_angles = [0.0; NUM_JOINTS];
        for spec in nao::registry() {
            let noise = rng.random_range(-INIT_NOISE_DEG..=INIT_NOISE_DEG);
            joint_angles[spec.index] = spec.clamp_angle(noise);
        }
        let mut s = MockState {
            sim_time: 0.0,
            joint_angles,
            joint_velocities: [0.0; NUM_JOINTS],
            commanded: [0.0; NUM_JOINTS],
            pelvis: Pose {
                x: 0.0,
                y: 0.0,
                rot_deg: 0.0,
            },
            feet: [[0.0; 3]; 2],
            foot_velocity: [[0.0; 3]; 2],
            sole_height: [0.0; 2],
            ball_pos: [0.0, 0.0, BALL_RADIUS],
            ball_vel: [0.0; 3],
            fallen: false,
            seed,
        };
        s.update_feet();
        s.foot_velocity = [[0.0; 3]; 2];
        s
    }

    pub fn beam(&mut self, pose: Pose) {
        self.pelvis = pose;
        self.update_feet();
        self.foot_velocity = [[0.0; 3]; 2];
    }

    pub fn place_ball(&mut self, pos: Vec3, vel: Vec3) {
        self.ball_pos = [pos[0], pos[1], pos[2].max(BALL_RADIUS)];
        self.ball_vel = [vel[0], vel[1], 0.0];
    }

    /// Forward kinematics for both legs; updates toe positions and velocities.
    fn update_feet(&mut self) {
        let (sin_r, cos_r) = self.pelvis.rot_deg.to_radians().sin_cos();
        for (i, leg) in legs().iter().enumerate() {
            let q1 = self.joint_angles[leg.hip_pitch].to_radians();
            let q12 = q1 + self.joint_angles[leg.knee].to_radians();
            let q123 = q12 + self.joint_angles[leg.ankle].to_radians();
            let ankle_x = THIGH_LENGTH * q1.sin() + SHIN_LENGTH * q12.sin();
            let ankle_z = HIP_HEIGHT - THIGH_LENGTH * q1.cos() - SHIN_LENGTH * q12.cos();
            let toe_x = ankle_x + FOOT_LENGTH * q123.cos();
            let toe_z = ankle_z + FOOT_LENGTH * q123.sin();
            let world = [
                self.pelvis.x + cos_r * toe_x - sin_r * leg.lateral,
                self.pelvis.y + sin_r * toe_x + cos_r * leg.lateral,
                toe_z,
            ];
            let prev = self.feet[i];
            self.foot_velocity[i] = std::array::from_fn(|k| (world[k] - prev[k]) / CYCLE);
            self.feet[i] = world;
            self.sole_height[i] = ankle_z.min(toe_z);
        }
    }

    fn foot_on_ground(&self, i: usize) -> bool {
        self.sole_height[i] <= HIP_HEIGHT - THIGH_LENGTH - SHIN_LENGTH + SOLE_TOLERANCE
    }

    /// Applies one batch of velocity commands and advances 0.02 s.
    pub fn advance_cycle(&mut self, batch: &EffectorBatch) {
        for (&joint, &v) in &batch.velocities {
            self.commanded[joint] = v;
        }
        for spec in nao::registry() {
            let i = spec.index;
            let v = self.commanded[i].clamp(-spec.max_speed, spec.max_speed);
            let next = spec.clamp_angle(self.joint_angles[i] + v * CYCLE);
            self.joint_velocities[i] = (next - self.joint_angles[i]) / CYCLE;
            self.joint_angles[i] = next;
        }
        self.update_feet();
        self.step_ball();
        self.sim_time += CYCLE;
        for leg in legs() {
            if self.joint_angles[leg.hip_pitch].abs() > FALL_HIP_PITCH
                || self.joint_angles[leg.hip_roll].abs() > FALL_HIP_ROLL
            {
                self.fallen = true;
            }
        }
    }

    fn contact_velocity(&self) -> Option<Vec3> {
        for i in 0..2 {
            let foot = self.feet[i];
            let to_ball: Vec3 = std::array::from_fn(|k| self.ball_pos[k] - foot[k]);
            let dist = dot(to_ball, to_ball).sqrt();
            let fv = self.foot_velocity[i];
            if dist <= CONTACT_DISTANCE && dot(fv, to_ball) > 0.0 {
                return Some([RESTITUTION * fv[0], RESTITUTION * fv[1], 0.0]);
            }
        }
        None
    }

    fn step_ball(&mut self) {
        if let Some(v) = self.contact_velocity() {
            self.ball_vel = v;
            self.ball_pos[0] += v[0] * CYCLE;
            self.ball_pos[1] += v[1] * CYCLE;
            return;
        }
        let speed = self.ball_vel[0].hypot(self.ball_vel[1]);
        if speed == 0.0 {
            return;
        }
        let dir = [self.ball_vel[0] / speed, self.ball_vel[1] / speed];
        let decel = ROLLING_FRICTION * CYCLE;
        let (travel, new_speed) = if speed <= decel {
            // comes to rest inside this cycle
            (speed * speed / (2.0 * ROLLING_FRICTION), 0.0)
        } else {
            let s = speed - decel;
            ((speed + s) / 2.0 * CYCLE, s)
        };
        self.ball_pos[0] += dir[0] * travel;
        self.ball_pos[1] += dir[1] * travel;
        self.ball_vel = [dir[0] * new_speed, dir[1] * new_speed, 0.0];
    }

    pub fn ball_speed(&self) -> f64 {
        self.ball_vel[0].hypot(self.ball_vel[1])
    }

    /// Sensor view of the current state.
    pub fn snapshot(&self) -> PerceptorSnapshot {
        let accel = if self.fallen {
            [-GRAVITY, 0.0, 0.0]
        } else {
            [0.0, 0.0, -GRAVITY]
        };
        let contacts = (0..2).filter(|&i| self.foot_on_ground(i)).count();
        let foot = |i: usize| {
            if self.foot_on_ground(i) {
                FootForce {
                    contact_point: [0.0, 0.0, -0.02],
                    force: [0.0, 0.0, ROBOT_WEIGHT_N / contacts as f64],
                }
            } else {
                FootForce::default()
            }
        };
        let (sin_r, cos_r) = self.pelvis.rot_deg.to_radians().sin_cos();
        let dx = self.ball_pos[0] - self.pelvis.x;
        let dy = self.ball_pos[1] - self.pelvis.y;
        let ball_rel = [
            cos_r * dx + sin_r * dy,
            -sin_r * dx + cos_r * dy,
            self.ball_pos[2] - TORSO_HEIGHT,
        ];
        PerceptorSnapshot {
            sim_time: self.sim_time,
            joint_angles: self.joint_angles,
            gyro: [0.0; 3],
            accel,
            left_foot: foot(0),
            right_foot: foot(1),
            ball_rel: Some(ball_rel),
            ball_world: Some(self.ball_pos),
            fallen_hint: Some(self.fallen),
            game_state: Some("PlayOn".into()),
        }
    }

    /// Perceptor payload for the current state.
    pub fn emit_snapshot(&self) -> Vec<u8> {
        protocol::encode_perceptors(&self.snapshot())
    }
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Seed for the `session`-th agent connection of a server seeded with `seed`.
pub fn session_seed(seed: u64, session: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ session.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Shared {
    stop: AtomicBool,
    active: Mutex<Vec<TcpStream>>,
    /// Ball placements received on the monitor port, applied before the next cycle.
    pending: Mutex<Vec<AgentCommand>>,
    sessions: AtomicU64,
}

/// A running mock server: one agent session at a time on `agent_port`, plus
/// a monitor port that accepts ball placement commands.
pub struct MockServer {
    agent_port: u16,
    monitor_port: u16,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

fn bind(port: u16) -> Result<TcpListener, WireError> {
    TcpListener::bind((Ipv4Addr::LOCALHOST, port)).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse | io::ErrorKind::PermissionDenied => WireError::PortInUse(port),
        _ => WireError::Io(e),
    })
}

impl MockServer {
    /// Binds both ports and starts serving. Each accepted agent connection is
    /// a fresh episode seeded from `seed` and the session counter.
    pub fn start(agent_port: u16, monitor_port: u16, seed: u64) -> Result<Self, WireError> {
        let agent = bind(agent_port)?;
        let monitor = bind(monitor_port)?;
        let shared = Arc::new(Shared {
            stop: AtomicBool::new(false),
            active: Mutex::new(Vec::new()),
            pending: Mutex::new(Vec::new()),
            sessions: AtomicU64::new(0),
        });
        let agent_thread = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name(format!("mock-agent-{agent_port}"))
                .spawn(move || accept_loop(agent, &shared, |s, sh| serve_agent(s, sh, seed)))?
        };
        let monitor_thread = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name(format!("mock-monitor-{monitor_port}"))
                .spawn(move || accept_loop(monitor, &shared, serve_monitor))?
        };
        debug!("mock server on {agent_port}/{monitor_port} seed {seed}");
        Ok(MockServer {
            agent_port,
            monitor_port,
            shared,
            threads: vec![agent_thread, monitor_thread],
        })
    }

    pub fn agent_port(&self) -> u16 {
        self.agent_port
    }

    pub fn monitor_port(&self) -> u16 {
        self.monitor_port
    }

    /// Agent sessions that completed a handshake so far.
    pub fn sessions(&self) -> u64 {
        self.shared.sessions.load(Ordering::SeqCst)
    }

    pub fn stop(&mut self) {
        if self.threads.is_empty() {
            return;
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        for s in self.shared.active.lock().unwrap().drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        // wake the blocking accept calls
        for port in [self.agent_port, self.monitor_port] {
            let _ = TcpStream::connect((Ipv4Addr::LOCALHOST, port));
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: &Shared, handler: impl Fn(TcpStream, &Shared)) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("mock accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            shared.active.lock().unwrap().push(clone);
        }
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        handler(stream, shared);
        shared.active.lock().unwrap().clear();
    }
}

fn serve_agent(mut stream: TcpStream, shared: &Shared, seed: u64) {
    let mut state: Option<MockState> = None;
    let mut batch = EffectorBatch::new(true);
    loop {
        let payload = match wire::frame_read(&mut stream) {
            Ok(p) => p,
            Err(WireError::ConnectionClosed) => return,
            Err(e) => {
                debug!("mock agent session ended: {e}");
                return;
            }
        };
        let commands = match protocol::parse_agent_commands(&payload) {
            Ok(c) => c,
            Err(e) => {
                warn!("mock rejected agent payload: {e}");
                continue;
            }
        };
        let st = state.get_or_insert_with(|| {
            let session = shared.sessions.fetch_add(1, Ordering::SeqCst);
            MockState::new(session_seed(seed, session))
        });
        for cmd in shared.pending.lock().unwrap().drain(..) {
            if let AgentCommand::PlaceBall { pos, vel } = cmd {
                st.place_ball(pos, vel);
            }
        }
        for cmd in commands {
            match cmd {
                AgentCommand::Scene(_) | AgentCommand::Init { .. } => {}
                AgentCommand::Beam { x, y, rot } => st.beam(Pose { x, y, rot_deg: rot }),
                AgentCommand::PlaceBall { pos, vel } => st.place_ball(pos, vel),
                AgentCommand::Velocity { joint, deg_per_s } => {
                    batch.set(joint, deg_per_s);
                }
                AgentCommand::Sync => {
                    st.advance_cycle(&batch);
                    batch = EffectorBatch::new(true);
                    if let Err(e) = wire::frame_write(&mut stream, &st.emit_snapshot()) {
                        debug!("mock agent write failed: {e}");
                        return;
                    }
                }
            }
        }
    }
}

fn serve_monitor(mut stream: TcpStream, shared: &Shared) {
    while let Ok(payload) = wire::frame_read(&mut stream) {
        match protocol::parse_agent_commands(&payload) {
            Ok(cmds) => shared.pending.lock().unwrap().extend(
                cmds.into_iter()
                    .filter(|c| matches!(c, AgentCommand::PlaceBall { .. })),
            ),
            Err(e) => warn!("mock monitor ignored payload: {e}"),
        }
    }
}
