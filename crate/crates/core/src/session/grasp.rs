//! Quasi-static grasping: objects snap to a closed gripper and fall straight
//! down onto the nearest support when released.

use std::collections::BTreeMap;

use nalgebra::{Isometry3, Point3, Translation3, Vector3};

use crate::kinematics::Poses;
use crate::model::RobotModel;
use crate::scene::{GraspParams, ObjectSpec};

/// Gripper frame: orientation of the first tracking site's link, origin at
/// the centroid of the tracking sites (the fingertip midpoint).
pub fn gripper_frames(model: &RobotModel, poses: &Poses) -> Vec<Isometry3<f64>> {
    model
        .grippers
        .iter()
        .map(|g| {
            let centroid = g.sites.iter().map(|&s| poses.site_position(s)).sum::<Vector3<f64>>() / g.sites.len() as f64;
            let rotation = poses.links[model.sites[g.sites[0]].link].rotation;
            Isometry3::from_parts(Translation3::from(centroid), rotation)
        })
        .collect()
}

/// Height an object at `p` comes to rest at: the highest top face of a
/// non-graspable object under it that is not above it, or the floor.
pub fn rest_height(objects: &[ObjectSpec], poses: &[Isometry3<f64>], index: usize, p: &Vector3<f64>) -> f64 {
    let mut rest = 0.0_f64;
    for (j, (spec, pose)) in objects.iter().zip(poses).enumerate() {
        if j == index || spec.graspable {
            continue;
        }
        let local = pose.inverse_transform_point(&Point3::from(*p));
        let (hx, hy) = spec.shape.half_footprint();
        let top = pose.translation.z + spec.shape.height();
        if local.x.abs() <= hx && local.y.abs() <= hy && top <= p.z + 1e-9 {
            rest = rest.max(top);
        }
    }
    rest
}

/// One grasp update. `attached` maps object index to (gripper, offset in
/// gripper frame).
pub fn update(
    params: &GraspParams,
    objects: &[ObjectSpec],
    frames: &[Isometry3<f64>],
    apertures: &[f64],
    poses: &mut [Isometry3<f64>],
    attached: &mut BTreeMap<usize, (usize, Isometry3<f64>)>,
    dt: f64,
) {
    for (g, (frame, &cmd)) in frames.iter().zip(apertures).enumerate() {
        if cmd > params.open {
            attached.retain(|_, (holder, _)| *holder != g);
        } else if cmd < params.close && !attached.values().any(|(holder, _)| *holder == g) {
            let origin = frame.translation.vector;
            let candidate = objects
                .iter()
                .enumerate()
                .filter(|(i, o)| o.graspable && !attached.contains_key(i))
                .map(|(i, _)| (i, (poses[i].translation.vector - origin).norm()))
                .filter(|&(_, d)| d <= params.radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = candidate {
                attached.insert(i, (g, frame.inverse() * poses[i]));
            }
        }
    }
    for (&i, (g, offset)) in attached.iter() {
        poses[i] = frames[*g] * offset;
    }
    for i in 0..poses.len() {
        if attached.contains_key(&i) {
            continue;
        }
        let p = poses[i].translation.vector;
        let rest = rest_height(objects, poses, i, &p);
        if p.z > rest {
            poses[i].translation.z = (p.z - params.descent * dt).max(rest);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Shape;
    use nalgebra::UnitQuaternion;

    fn cube(graspable: bool, size: f64) -> ObjectSpec {
        ObjectSpec {
            id: "o".into(),
            shape: Shape::Box {
                size: Vector3::new(size, size, size),
            },
            pose: Isometry3::identity(),
            graspable,
        }
    }

    #[test]
    fn far_object_not_attached() {
        let objects = [cube(true, 0.02)];
        let mut poses = [Isometry3::translation(1.0, 0.0, 0.0)];
        let mut attached = BTreeMap::new();
        update(&GraspParams::default(), &objects, &[Isometry3::identity()], &[0.0], &mut poses, &mut attached, 0.005);
        assert!(attached.is_empty());
    }

    #[test]
    fn attach_then_carry() {
        let objects = [cube(true, 0.02)];
        let mut poses = [Isometry3::translation(0.0, 0.0, 0.2)];
        let mut attached = BTreeMap::new();
        let p = GraspParams::default();
        let frame = Isometry3::translation(0.0, 0.0, 0.2);
        update(&p, &objects, &[frame], &[0.1], &mut poses, &mut attached, 0.005);
        assert_eq!(attached.len(), 1);
        let moved = Isometry3::from_parts(Translation3::new(0.1, 0.2, 0.3), UnitQuaternion::from_euler_angles(0.0, 0.0, 0.5));
        update(&p, &objects, &[moved], &[0.1], &mut poses, &mut attached, 0.005);
        assert!((poses[0].translation.vector - Vector3::new(0.1, 0.2, 0.3)).norm() < 1e-12);
        assert!((poses[0].rotation.angle() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hysteresis_holds_between_thresholds() {
        let objects = [cube(true, 0.02)];
        let mut poses = [Isometry3::translation(0.0, 0.0, 0.3)];
        let mut attached = BTreeMap::new();
        let p = GraspParams::default();
        let frame = Isometry3::translation(0.0, 0.0, 0.3);
        // inside the band nothing attaches
        update(&p, &objects, &[frame], &[0.45], &mut poses, &mut attached, 0.005);
        assert!(attached.is_empty());
        update(&p, &objects, &[frame], &[0.1], &mut poses, &mut attached, 0.005);
        // and nothing releases
        update(&p, &objects, &[frame], &[0.55], &mut poses, &mut attached, 0.005);
        assert_eq!(attached.len(), 1);
    }

    #[test]
    fn released_object_falls_to_floor_in_point_three_seconds() {
        let objects = [cube(true, 0.02)];
        let mut poses = [Isometry3::translation(0.0, 0.0, 0.3)];
        let mut attached = BTreeMap::new();
        let p = GraspParams::default();
        let frame = Isometry3::translation(0.0, 0.0, 0.3);
        update(&p, &objects, &[frame], &[0.1], &mut poses, &mut attached, 0.005);
        let mut ticks = 0;
        loop {
            update(&p, &objects, &[frame], &[0.7], &mut poses, &mut attached, 0.005);
            ticks += 1;
            if poses[0].translation.z == 0.0 {
                break;
            }
        }
        assert!(attached.is_empty());
        // 0.3 m at 1 m/s in 5 ms steps, give or take float rounding of the last step
        assert!((59..=61).contains(&ticks), "{ticks}");
    }

    #[test]
    fn lands_on_support() {
        let objects = [cube(true, 0.02), cube(false, 0.1)];
        let mut poses = [Isometry3::translation(0.01, 0.0, 0.3), Isometry3::identity()];
        let mut attached = BTreeMap::new();
        for _ in 0..200 {
            update(&GraspParams::default(), &objects, &[], &[], &mut poses, &mut attached, 0.005);
        }
        assert_eq!(poses[0].translation.z, 0.1);
        assert_eq!(poses[1].translation.z, 0.0);
    }
}
