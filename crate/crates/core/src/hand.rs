//! Tracked hand frames, the keypoint layout and the synthetic hand rig.

use nalgebra::{Isometry3, Point3, UnitQuaternion, Vector3};

pub const KEYPOINT_COUNT: usize = 25;

/// Keypoint indices. 1–4 thumb, 5–8 index, 9–12 middle, 13–16 ring,
/// 17–20 little (tip last in each run), 21–24 forearm/metacarpal auxiliaries.
pub mod layout {
    pub const WRIST: usize = 0;
    pub const THUMB_IP: usize = 3;
    pub const THUMB_TIP: usize = 4;
    pub const INDEX_IP: usize = 7;
    pub const INDEX_TIP: usize = 8;
    pub const MIDDLE_TIP: usize = 12;
    pub const RING_TIP: usize = 16;
    pub const LITTLE_TIP: usize = 20;

    /// Keypoints tracked by a parallel-jaw gripper, in gripper site order.
    pub const PARALLEL_JAW: [usize; 4] = [THUMB_TIP, THUMB_IP, INDEX_TIP, INDEX_IP];
    /// Keypoints tracked by a dexterous hand, in gripper site order.
    pub const DEXTEROUS: [usize; 6] = [THUMB_TIP, INDEX_TIP, MIDDLE_TIP, RING_TIP, LITTLE_TIP, WRIST];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Handedness {
    Left,
    #[default]
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Keypoint {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HandError {
    #[error("hand frame needs {KEYPOINT_COUNT} keypoints, got {0}")]
    KeypointCount(usize),
    #[error("keypoint {0} has a non-unit orientation")]
    NonUnitQuaternion(usize),
    #[error("keypoint {0} is not finite")]
    NonFinite(usize),
}

/// One sample of the tracked hand skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct HandFrame {
    pub keypoints: [Keypoint; KEYPOINT_COUNT],
    pub timestamp_us: u64,
    pub handedness: Handedness,
}

impl HandFrame {
    pub fn new(keypoints: &[Keypoint], timestamp_us: u64, handedness: Handedness) -> Result<Self, HandError> {
        let keypoints: [Keypoint; KEYPOINT_COUNT] = keypoints
            .try_into()
            .map_err(|_| HandError::KeypointCount(keypoints.len()))?;
        for (i, k) in keypoints.iter().enumerate() {
            if !k.position.iter().all(|v| v.is_finite()) {
                return Err(HandError::NonFinite(i));
            }
            if (k.orientation.quaternion().norm() - 1.0).abs() > 1e-6 {
                return Err(HandError::NonUnitQuaternion(i));
            }
        }
        Ok(Self {
            keypoints,
            timestamp_us,
            handedness,
        })
    }

    /// All 25 keypoints at one position with identity orientation.
    pub fn collapsed(position: Vector3<f64>, timestamp_us: u64) -> Self {
        Self {
            keypoints: [Keypoint {
                position,
                orientation: UnitQuaternion::identity(),
            }; KEYPOINT_COUNT],
            timestamp_us,
            handedness: Handedness::Right,
        }
    }

    pub fn position(&self, index: usize) -> Vector3<f64> {
        self.keypoints[index].position
    }
}

/// Similarity transform from hand-tracking space into robot workspace:
/// `p ↦ translation + scale · rotation · p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }
}

impl Calibration {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + (self.rotation * p) * self.scale
    }
}

/// Thumb–index span at which the normalized aperture saturates, meters.
pub const APERTURE_REFERENCE: f64 = 0.12;

/// Skeletal hand template driven by a wrist pose and a grip value.
///
/// Fingers extend along the wrist frame's +z axis with the thumb on +y and
/// the index finger on −y. The thumb–index separation is
/// `APERTURE_REFERENCE · (1 − grip)`, so grip 0 is a fully open pinch and
/// grip 1 brings the tips together.
#[derive(Debug, Clone, Copy, Default)]
pub struct HandRig;

impl HandRig {
    fn template(grip: f64) -> [Vector3<f64>; KEYPOINT_COUNT] {
        let h = 0.5 * APERTURE_REFERENCE * (1.0 - grip.clamp(0.0, 1.0));
        let v = Vector3::new;
        let curl = |x: f64, y: f64| [v(x, y, 0.045), v(x, y, 0.07), v(x, y, 0.09), v(x + 0.01, y, 0.105)];
        let middle = curl(0.02, -0.01);
        let ring = curl(0.035, 0.0);
        let little = curl(0.05, 0.01);
        [
            v(0.0, 0.0, 0.0),
            v(0.0, 0.01 + 0.3 * h, 0.03),
            v(0.0, 0.005 + 0.7 * h, 0.065),
            v(0.0, h, 0.10),
            v(0.0, h, 0.14),
            v(0.0, -0.02, 0.04),
            v(0.0, -0.01 - 0.5 * h, 0.07),
            v(0.0, -h, 0.10),
            v(0.0, -h, 0.14),
            middle[0],
            middle[1],
            middle[2],
            middle[3],
            ring[0],
            ring[1],
            ring[2],
            ring[3],
            little[0],
            little[1],
            little[2],
            little[3],
            v(0.0, 0.0, -0.03),
            v(0.0, 0.0, -0.06),
            v(0.01, 0.0, 0.02),
            v(-0.01, 0.0, 0.02),
        ]
    }

    pub fn frame(&self, wrist: &Isometry3<f64>, grip: f64, timestamp_us: u64) -> HandFrame {
        let mut keypoints = [Keypoint::default(); KEYPOINT_COUNT];
        for (k, p) in keypoints.iter_mut().zip(Self::template(grip)) {
            *k = Keypoint {
                position: (wrist * Point3::from(p)).coords,
                orientation: wrist.rotation,
            };
        }
        HandFrame {
            keypoints,
            timestamp_us,
            handedness: Handedness::Right,
        }
    }
}
