//! Seeded synthetic dataset: soft-edged ellipses on noisy backgrounds.
//!
//! Each case is a random ellipse ("organ") with semi-axes between 15% and
//! 35% of the image size, rotated freely, brighter than the background,
//! with additive Gaussian noise (sigma 0.05) — plus the exact binary
//! ellipse mask. Everything is drawn from one ChaCha stream, so a given
//! `(n_cases, size, seed)` always produces byte-identical files.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::manifest::{load_manifest, DatasetManifest};
use crate::io::pgm::write_pgm;
use crate::tensor::{Shape, Tensor};

pub const NOISE_SIGMA: f64 = 0.05;

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates `n_cases` image/mask pairs under `out_dir` and writes
/// `manifest.csv`. `size` must be divisible by 16 so a five-scale pyramid
/// fits.
pub fn synth_dataset(
    n_cases: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_cases < 1 {
        return Err(Error::Usage("synth_dataset needs at least one case".into()));
    }
    if size % 16 != 0 || size == 0 {
        return Err(Error::Usage(format!(
            "synthetic image size must be divisible by 16, got {size}"
        )));
    }
    create_dir(out_dir)?;
    create_dir(&out_dir.join("images"))?;
    create_dir(&out_dir.join("masks"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut manifest_text = String::from("case_id,image,mask\n");

    for case in 0..n_cases {
        let case_id = format!("case_{case:03}");
        let fsize = size as f64;

        let rx = rng.gen_range(0.15 * fsize..0.35 * fsize);
        let ry = rng.gen_range(0.15 * fsize..0.35 * fsize);
        let cx = rng.gen_range(rx + 1.0..fsize - rx - 1.0);
        let cy = rng.gen_range(ry + 1.0..fsize - ry - 1.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let background = rng.gen_range(0.15..0.35);
        let offset = rng.gen_range(0.30..0.45);
        let (sin_t, cos_t) = theta.sin_cos();
        // soft edge roughly 1.5 px wide in normalized radius units
        let edge = 1.5 / rx.min(ry);

        let mut image = Tensor::<f32>::zeros(Shape::new(1, 1, size, size));
        let mut mask = Tensor::<f32>::zeros(Shape::new(1, 1, size, size));
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (dx * cos_t + dy * sin_t) / rx;
                let v = (-dx * sin_t + dy * cos_t) / ry;
                let q = u * u + v * v;
                if q <= 1.0 {
                    mask.set(0, 0, y, x, 1.0);
                }
                let ramp = ((1.0 - q.sqrt()) / edge + 0.5).clamp(0.0, 1.0);
                let value = background + offset * ramp + noise.sample(&mut rng);
                image.set(0, 0, y, x, value.clamp(0.0, 1.0) as f32);
            }
        }
        let image_rel = format!("images/{case_id}.pgm");
        let mask_rel = format!("masks/{case_id}.pgm");
        write_pgm(&image, &out_dir.join(&image_rel))?;
        write_pgm(&mask, &out_dir.join(&mask_rel))?;
        manifest_text.push_str(&format!("{case_id},{image_rel},{mask_rel}\n"));
    }

    let manifest_path: PathBuf = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest_text).map_err(|e| Error::io(&manifest_path, e))?;
    load_manifest(&manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_dataset(3, 32, 77, d1.path()).unwrap();
        synth_dataset(3, 32, 77, d2.path()).unwrap();
        for rel in [
            "manifest.csv",
            "images/case_000.pgm",
            "images/case_002.pgm",
            "masks/case_001.pgm",
        ] {
            assert_eq!(
                std::fs::read(d1.path().join(rel)).unwrap(),
                std::fs::read(d2.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn mask_area_within_geometry_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(10, 64, 5, dir.path()).unwrap();
        let cases = manifest.load_cases(5).unwrap();
        assert_eq!(cases.len(), 10);
        for case in &cases {
            let area = case.mask.data().iter().filter(|&&v| v == 1.0).count() as f64
                / case.mask.len() as f64;
            assert!(
                (0.02..=0.45).contains(&area),
                "case {} area {area}",
                case.id
            );
        }
    }

    #[test]
    fn organ_is_brighter_than_background() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(5, 64, 11, dir.path()).unwrap();
        for case in manifest.load_cases(5).unwrap() {
            let mut inside = (0.0, 0usize);
            let mut outside = (0.0, 0usize);
            for (i, &m) in case.mask.data().iter().enumerate() {
                let v = case.image.data()[i] as f64;
                if m == 1.0 {
                    inside = (inside.0 + v, inside.1 + 1);
                } else {
                    outside = (outside.0 + v, outside.1 + 1);
                }
            }
            let mean_in = inside.0 / inside.1 as f64;
            let mean_out = outside.0 / outside.1 as f64;
            assert!(mean_in > mean_out + 0.1, "case {}", case.id);
        }
    }

    #[test]
    fn unique_case_ids() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(10, 32, 3, dir.path()).unwrap();
        let ids = manifest.case_ids();
        let unique: std::collections::BTreeSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), 10);
    }
}
