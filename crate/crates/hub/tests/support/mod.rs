#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::episode::{EpisodeLog, TrackingMode};
use teleop_core::hand::HandFrame;
use teleop_core::protocol::TrackingPayload;
use teleop_core::session::{Owner, SessionParams, TrackingInput};
use teleop_core::{Registry, Session};
use teleop_hub::Principal;

pub fn principal(user: &str) -> Principal {
    Principal {
        user_id: user.to_string(),
        fingerprint: format!("{user}-fp"),
        admin: false,
    }
}

/// A short recorded episode with random hand motion, owned by `user`.
pub fn episode(registry: &Registry, user: &str, seed: u64, mode: TrackingMode) -> EpisodeLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = ["planar_reach", "sort_bolts", "mug_basket"];
    let scene = scenes[rng.random_range(0..scenes.len())];
    let params = SessionParams {
        tracking_mode: mode,
        ..SessionParams::default()
    };
    let owner = Owner {
        user_id: user.to_string(),
        token_fingerprint: format!("{user}-fp"),
    };
    let mut s = Session::new(1, registry.scene(scene).unwrap().clone(), params, seed, owner);
    let ticks = rng.random_range(1..40);
    for k in 0..ticks {
        if rng.random_bool(0.5) {
            let p = Vector3::new(rng.random_range(0.2..0.6), rng.random_range(-0.4..0.4), rng.random_range(0.1..0.4));
            let frame = HandFrame::collapsed(p, 0);
            s.mailbox().post(TrackingInput::new(k + 1, 0, TrackingPayload::from_frame(&frame)));
        }
        s.step();
    }
    s.end_episode().unwrap()
}
