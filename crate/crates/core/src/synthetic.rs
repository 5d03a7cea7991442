//! Deterministic synthetic scenes for tests, demos and the bundled fixture.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{save_cameras, save_gaussians, Camera, Gaussian, Scene};
use crate::sh;

/// Isotropic, axis-aligned Gaussian with a flat RGB color.
pub fn gaussian(id: usize, mean: [f64; 3], scale: f64, opacity: f64, rgb: [f64; 3]) -> Gaussian {
    Gaussian {
        id,
        mean: Vector3::from(mean),
        scale: Vector3::repeat(scale),
        rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
        opacity,
        sh: vec![sh::dc_from_rgb(rgb)],
        category: None,
        embedding: None,
    }
}

/// Camera at `eye` looking at `target`, world +z up, square pixels with the given horizontal FOV.
pub fn look_at(id: u32, eye: [f64; 3], target: [f64; 3], width: u32, height: u32, hfov_deg: f64) -> Camera {
    let eye = Vector3::from(eye);
    let forward = (Vector3::from(target) - eye).normalize();
    let up = if forward.cross(&Vector3::z()).norm() > 1e-9 {
        Vector3::z()
    } else {
        Vector3::y()
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
    Camera {
        id,
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        rotation,
        translation: -(rotation * eye),
        near: 0.05,
        far: 100.0,
    }
}

/// `n` small Gaussians on a line, no cameras; for plumbing tests.
pub fn grid_scene(n: usize, _seed: u64) -> Scene {
    let gs = (0..n)
        .map(|i| gaussian(i, [i as f64, 0.0, 0.0], 0.1, 0.8, [0.5, 0.5, 0.5]))
        .collect();
    Scene::new(gs, Vec::new(), Vec::new()).expect("grid scene is valid")
}

/// Points of a compact blob: a 3-D lattice with a deterministic sub-lattice jitter.
pub fn blob(center: [f64; 3], count: usize, spacing: f64) -> Vec<[f64; 3]> {
    let side = (count as f64).cbrt().ceil() as usize;
    let half = (side as f64 - 1.0) / 2.0;
    (0..count)
        .map(|i| {
            let (a, b, c) = (i % side, (i / side) % side, i / (side * side));
            let jitter = |k: usize| 0.15 * spacing * ((i * 7 + k * 13) as f64).sin();
            [
                center[0] + (a as f64 - half) * spacing + jitter(0),
                center[1] + (b as f64 - half) * spacing + jitter(1),
                center[2] + (c as f64 - half) * spacing + jitter(2),
            ]
        })
        .collect()
}

/// Vocabulary of the bundled fixture scene.
pub const FIXTURE_VOCAB: [&str; 5] = ["pillow", "sink", "table", "cushion", "radiator"];

/// Three labelled instances (two pillows and a sink) resting on a table slab, seen by a ring
/// of eight cameras. Labels are attached; the vocabulary is [`FIXTURE_VOCAB`].
pub fn fixture_scene() -> Scene {
    let mut gs = Vec::new();
    let mut push = |mean: [f64; 3], scale: f64, rgb: [f64; 3], cat: usize| {
        let mut g = gaussian(gs.len(), mean, scale, 0.9, rgb);
        g.category = Some(cat);
        gs.push(g);
    };
    for p in blob([-1.2, 0.0, 0.35], 27, 0.09) {
        push(p, 0.07, [0.9, 0.2, 0.2], 0);
    }
    for p in blob([1.2, 0.0, 0.35], 27, 0.09) {
        push(p, 0.07, [0.2, 0.3, 0.9], 0);
    }
    for p in blob([0.0, 1.3, 0.35], 27, 0.09) {
        push(p, 0.07, [0.85, 0.85, 0.85], 1);
    }
    for i in 0..12 {
        for j in 0..6 {
            let x = -2.2 + 0.4 * i as f64;
            let y = -1.0 + 0.5 * j as f64;
            push([x, y, 0.0], 0.2, [0.55, 0.35, 0.15], 2);
        }
    }
    let cameras = (0..8)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 8.0;
            look_at(k, [4.0 * a.cos(), 4.0 * a.sin(), 1.6], [0.0, 0.3, 0.3], 64, 48, 60.0)
        })
        .collect();
    Scene::new(gs, cameras, FIXTURE_VOCAB.iter().map(|s| s.to_string()).collect()).expect("fixture scene is valid")
}

/// Mock gateway script that drives the fixture end to end.
pub const FIXTURE_MOCK_SCRIPT: &str = include_str!("../assets/fixture/mock_script.json");

/// Writes the fixture as `scene.ply`, `cameras.json`, `categories.json` and `mock_script.json`.
pub fn write_fixture(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scene = fixture_scene();
    save_gaussians(&dir.join("scene.ply"), &scene)?;
    save_cameras(&dir.join("cameras.json"), scene.cameras())?;
    let labels: Vec<Option<&str>> = scene
        .gaussians()
        .iter()
        .map(|g| g.category.map(|c| FIXTURE_VOCAB[c]))
        .collect();
    let sidecar = serde_json::json!({
        "mode": "category",
        "vocab": FIXTURE_VOCAB,
        "labels": labels,
    });
    let path = dir.join("categories.json");
    fs::write(&path, serde_json::to_string(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("mock_script.json");
    fs::write(&path, FIXTURE_MOCK_SCRIPT).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_centers_target() {
        let cam = look_at(0, [3.0, 1.0, 2.0], [0.0, 0.0, 0.5], 64, 48, 60.0);
        cam.validate().unwrap();
        let p = cam.to_camera(&Vector3::new(0.0, 0.0, 0.5));
        let [u, v] = cam.project(&p);
        assert!((u - 32.0).abs() < 1e-9 && (v - 24.0).abs() < 1e-9);
        // world up projects upwards in the image
        let above = cam.project(&cam.to_camera(&Vector3::new(0.0, 0.0, 1.0)));
        assert!(above[1] < 24.0);
    }

    #[test]
    fn fixture_is_valid_and_labelled() {
        let s = fixture_scene();
        assert_eq!(s.cameras().len(), 8);
        assert!(s.gaussians().iter().all(|g| g.category.is_some()));
    }
}
