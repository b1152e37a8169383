//! Bundled robot, scene and operator script descriptions.

pub const PLANAR1: &str = include_str!("../fixtures/planar1.robot");
pub const PLANAR2: &str = include_str!("../fixtures/planar2.robot");
pub const DUALARM7: &str = include_str!("../fixtures/dualarm7.robot");

pub const SORT_BOLTS: &str = include_str!("../fixtures/sort_bolts.scene");
pub const MUG_BASKET: &str = include_str!("../fixtures/mug_basket.scene");
pub const PLANAR_REACH: &str = include_str!("../fixtures/planar_reach.scene");

pub const ROBOTS: [&str; 3] = [PLANAR1, PLANAR2, DUALARM7];
pub const SCENES: [&str; 3] = [SORT_BOLTS, MUG_BASKET, PLANAR_REACH];

pub const PICK_PLACE_SCRIPT: &str = include_str!("../fixtures/scripts/pick_place.script");
pub const NEAR_COLLISION_SCRIPT: &str = include_str!("../fixtures/scripts/near_collision.script");
pub const RESET_THREE_SCRIPT: &str = include_str!("../fixtures/scripts/reset_three.script");
pub const EMPTY_SCRIPT: &str = include_str!("../fixtures/scripts/empty.script");
