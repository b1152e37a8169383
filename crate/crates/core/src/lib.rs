//! Core of a state-streaming teleoperation simulator.
//!
//! Operators send hand keypoints; the server retargets them onto robot
//! tracking sites with a constrained differential IK step, advances a
//! kinematic world and streams back joint values and object poses instead of
//! rendered frames. Every tick is recorded into a self-describing episode log.

pub mod desc;
pub mod diffik;
pub mod episode;
pub mod fixtures;
pub mod hand;
pub mod kinematics;
pub mod model;
pub mod par;
pub mod protocol;
pub mod qp;
pub mod registry;
pub mod replay;
pub mod scene;
pub mod script;
pub mod session;

pub use diffik::{IkParams, SolveStatus, TargetSet, VelocityCommand};
pub use hand::{Calibration, HandFrame, Handedness};
pub use kinematics::{forward_kinematics, min_self_distance, site_jacobian, CollisionReport};
pub use model::{parse_robot, RobotModel};
pub use registry::Registry;
pub use scene::{parse_scene, SceneSpec};
pub use session::{Session, SessionError, SimState};
