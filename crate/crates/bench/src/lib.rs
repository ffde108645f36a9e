//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scalesplat::lie::SE3Pose;
use scalesplat::losses::SupervisionBundle;
use scalesplat::posegraph::{Camera, Problem};
use scalesplat::splat::{random_scene, render, GaussianPrimitive, ViewCamera};
use scalesplat::synth::{build_problem, make_world, observe_with, ObserveOptions, ProblemOptions, WorldSpec};

/// `n` random primitives in front of a `w` x `h` camera at the origin.
pub fn splat_scene(n: usize, w: u32, h: u32) -> (Vec<GaussianPrimitive>, ViewCamera) {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let f = w as f64;
    let cam = Camera::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).expect("valid camera");
    let view = ViewCamera::new(cam, SE3Pose::identity()).expect("valid view");
    (random_scene(&mut rng, n), view)
}

/// Supervision that differs from the scene's own rendering.
pub fn supervision(scene: &[GaussianPrimitive], view: &ViewCamera) -> SupervisionBundle {
    let b = render(scene, view);
    let mut rgb = b.color.clone();
    for v in rgb.data.iter_mut() {
        *v = 1.0 - *v;
    }
    let mut normals = b.normal.clone();
    for p in normals.data.chunks_mut(3) {
        p.copy_from_slice(&[0.0, 0.0, -1.0]);
    }
    SupervisionBundle::new(rgb, normals).expect("matching shapes")
}

/// The noisy circle-room refinement problem for `seed`.
pub fn circle_room_problem(seed: u64) -> Problem {
    let world = make_world(WorldSpec::CircleRoom, seed).expect("known world");
    let obs = observe_with(&world, ObserveOptions { render: false }).expect("observations");
    build_problem(&world, &obs, &ProblemOptions::for_world(&world)).expect("valid problem")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_usable() {
        let (scene, view) = splat_scene(50, 64, 48);
        assert_eq!(scene.len(), 50);
        let b = supervision(&scene, &view);
        assert_eq!(b.rgb.width, 64);
        assert!(circle_room_problem(0).validate().is_ok());
    }
}
