//! The collision predicate: ego and object centers closer than the safety
//! threshold plus both half-widths.

use crate::scene::{BevScene, Footprint, Pose2, EGO_FOOTPRINT};

pub const DEFAULT_EPSILON: f64 = 0.5;

pub fn collision_radius(epsilon: f64, other: &Footprint) -> f64 {
    epsilon + EGO_FOOTPRINT.width as f64 / 2.0 + other.width as f64 / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub timestep: usize,
    pub object_index: usize,
    pub instance_id: f32,
    pub distance: f64,
}

/// Earliest contact of an ego path with any replayed object. `ego` yields the
/// ego pose at a timestep; timesteps are scanned in order, objects in scene
/// order, and the first hit wins.
pub fn first_contact(
    scene: &BevScene,
    epsilon: f64,
    timesteps: impl IntoIterator<Item = usize>,
    ego: impl Fn(usize) -> Pose2,
) -> Option<Contact> {
    for t in timesteps {
        let e = ego(t);
        for (j, o) in scene.objects.iter().enumerate() {
            let d = e.distance(&o.trajectory.at(t));
            if d < collision_radius(epsilon, &o.footprint) {
                return Some(Contact { timestep: t, object_index: j, instance_id: o.instance_id, distance: d });
            }
        }
    }
    None
}
