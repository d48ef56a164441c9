//! Parse a perceptor message, decode it into a snapshot, and build the
//! effector reply.

use rcgym::nao;
use rcgym::protocol::{decode_snapshot, encode_effectors, EffectorBatch};
use rcgym::sexpr;

const MESSAGE: &[u8] = b"(time (now 46.62))(GS (t 0.00) (pm BeforeKickOff))\
(GYR (n torso) (rt 0.01 -0.02 0.00))(ACC (n torso) (a 0.00 0.00 9.81))\
(HJ (n hj1) (ax -0.00))(HJ (n rlj3) (ax 12.50))(HJ (n rlj4) (ax -30.00))\
(See (B (pol 0.21 -3.10 -52.00)))";

fn main() {
    let exprs = sexpr::parse(MESSAGE).expect("well-formed message");
    for e in &exprs {
        println!("{:<6} {}", e.head().unwrap_or("?"), e);
    }

    let snap = decode_snapshot(MESSAGE, None).expect("known perceptors");
    let rlj3 = nao::by_name("rlj3").unwrap().index;
    println!("\nsim_time {} s, rlj3 at {} deg", snap.sim_time, snap.joint_angles[rlj3]);
    println!("ball relative to torso: {:?}", snap.ball_rel);

    let mut reply = EffectorBatch::new(true);
    reply.set(rlj3, 120.0).set(nao::by_name("rlj4").unwrap().index, -45.5);
    println!("\nreply: {}", String::from_utf8_lossy(&encode_effectors(&reply).unwrap()));
}
