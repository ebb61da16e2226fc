//! Deterministic synthetic dataset: two in-distribution shape classes with
//! localizable objects, and three out-of-distribution families without
//! class-discriminative structure. Every sample ships a binary object mask
//! so CAM localization can be checked against ground truth.

use std::path::{Path, PathBuf};

use super::{netpbm, write_manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const ID_DIR: &str = "id";
pub const OOD_FAMILIES: [&str; 3] = ["ood_noise", "ood_stripes", "ood_rings"];

const PIXEL_NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub id_manifest: PathBuf,
    pub ood_manifests: Vec<PathBuf>,
    pub files_written: usize,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pair(
    dir: &Path,
    rel_image: &str,
    image: &[f64],
    mask: &[bool],
    size: usize,
    files: &mut usize,
) -> Result<()> {
    let img_bytes: Vec<u8> = image.iter().map(|&v| quantize(v)).collect();
    let mask_bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img_path = dir.join(rel_image);
    let mask_path = dir.join(mask_rel_path(rel_image));
    std::fs::write(&img_path, netpbm::encode_pgm(size, size, &img_bytes))
        .map_err(|e| Error::io(&img_path, e))?;
    std::fs::write(&mask_path, netpbm::encode_pgm(size, size, &mask_bytes))
        .map_err(|e| Error::io(&mask_path, e))?;
    *files += 2;
    Ok(())
}

/// Ground-truth mask path for an image path inside the same dataset dir.
pub fn mask_rel_path(image_rel: &str) -> String {
    image_rel.replacen("images/", "masks/", 1)
}

fn add_noise(image: &mut [f64], rng: &mut SplitMix64) {
    for v in image.iter_mut() {
        *v = (*v + PIXEL_NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0);
    }
}

/// Disk (class 0) or square (class 1). Object areas land in roughly
/// 6%..38% of the image, inside the 5%..40% band the tests check.
fn id_sample(class: usize, size: usize, rng: &mut SplitMix64) -> (Vec<f64>, Vec<bool>) {
    let s = size as f64;
    let background = rng.uniform(0.10, 0.35);
    let contrast = rng.uniform(0.35, 0.60);
    let object = background + contrast;
    let mut image = vec![background; size * size];
    let mut mask = vec![false; size * size];
    match class {
        0 => {
            let r = s * rng.uniform(0.14, 0.34);
            let cx = rng.uniform(r + 1.0, s - r - 1.0);
            let cy = rng.uniform(r + 1.0, s - r - 1.0);
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        image[y * size + x] = object;
                        mask[y * size + x] = true;
                    }
                }
            }
        }
        _ => {
            let side = (s * rng.uniform(0.25, 0.62)).round() as usize;
            let x0 = 1 + rng.below(size - side - 1);
            let y0 = 1 + rng.below(size - side - 1);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    image[y * size + x] = object;
                    mask[y * size + x] = true;
                }
            }
        }
    }
    add_noise(&mut image, rng);
    (image, mask)
}

fn noise_sample(size: usize, rng: &mut SplitMix64) -> (Vec<f64>, Vec<bool>) {
    let image: Vec<f64> = (0..size * size).map(|_| rng.next_f64()).collect();
    (image, vec![false; size * size])
}

fn stripes_sample(size: usize, rng: &mut SplitMix64) -> (Vec<f64>, Vec<bool>) {
    let period = [4, 6, 8][rng.below(3)];
    let phase = rng.below(period);
    let lo = rng.uniform(0.10, 0.30);
    let hi = lo + rng.uniform(0.35, 0.60);
    let mut image = vec![0.0f64; size * size];
    let mut mask = vec![false; size * size];
    for y in 0..size {
        let bright = (y + phase) % period < period / 2;
        for x in 0..size {
            image[y * size + x] = if bright { hi } else { lo };
            mask[y * size + x] = bright;
        }
    }
    add_noise(&mut image, rng);
    (image, mask)
}

fn rings_sample(size: usize, rng: &mut SplitMix64) -> (Vec<f64>, Vec<bool>) {
    let s = size as f64;
    let background = rng.uniform(0.10, 0.35);
    let object = background + rng.uniform(0.35, 0.60);
    let outer = s * rng.uniform(0.16, 0.34);
    let inner = outer * rng.uniform(0.55, 0.70);
    let cx = rng.uniform(outer + 1.0, s - outer - 1.0);
    let cy = rng.uniform(outer + 1.0, s - outer - 1.0);
    let mut image = vec![background; size * size];
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= outer * outer && d2 >= inner * inner {
                image[y * size + x] = object;
                mask[y * size + x] = true;
            }
        }
    }
    add_noise(&mut image, rng);
    (image, mask)
}

fn split_for(index: usize, total: usize) -> Split {
    // 70/10/20 train/calib/test
    if index * 10 < total * 7 {
        Split::Train
    } else if index * 10 < total * 8 {
        Split::Calib
    } else {
        Split::Test
    }
}

/// Generate the full tree under `out`:
///
/// ```text
/// out/id/{images,masks}/c{class}_{index}.pgm + out/id/manifest.csv
/// out/ood_<family>/{images,masks}/... + manifest.csv (all split=test)
/// ```
///
/// The tree is a pure function of (seed, n_per_class, size).
pub fn synth_generate(
    out: &Path,
    seed: u64,
    n_per_class: usize,
    size: usize,
) -> Result<SynthSummary> {
    if n_per_class < 10 {
        return Err(Error::invalid(
            "synth_generate",
            format!("n_per_class must be at least 10, got {n_per_class}"),
        ));
    }
    if size < 16 {
        return Err(Error::invalid(
            "synth_generate",
            format!("image size must be at least 16, got {size}"),
        ));
    }
    let root = SplitMix64::new(seed);
    let mut files = 0usize;

    let id_dir = out.join(ID_DIR);
    for sub in ["images", "masks"] {
        let d = id_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut id_rows = Vec::new();
    let mut rng = root.fork(0x1d);
    for class in 0..2usize {
        for i in 0..n_per_class {
            let (image, mask) = id_sample(class, size, &mut rng);
            let rel = format!("images/c{class}_{i:04}.pgm");
            write_pair(&id_dir, &rel, &image, &mask, size, &mut files)?;
            id_rows.push(ManifestRow {
                path: rel,
                label: Some(class),
                split: split_for(i, n_per_class),
            });
        }
    }
    let id_manifest = id_dir.join("manifest.csv");
    write_manifest(&id_manifest, &id_rows)?;

    let mut ood_manifests = Vec::new();
    for (fi, family) in OOD_FAMILIES.iter().enumerate() {
        let fam_dir = out.join(family);
        for sub in ["images", "masks"] {
            let d = fam_dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut rows = Vec::new();
        let mut rng = root.fork(0x0d + fi as u64);
        for i in 0..n_per_class {
            let (image, mask) = match fi {
                0 => noise_sample(size, &mut rng),
                1 => stripes_sample(size, &mut rng),
                _ => rings_sample(size, &mut rng),
            };
            let rel = format!("images/{family}_{i:04}.pgm");
            write_pair(&fam_dir, &rel, &image, &mask, size, &mut files)?;
            rows.push(ManifestRow {
                path: rel,
                label: None,
                split: Split::Test,
            });
        }
        let manifest = fam_dir.join("manifest.csv");
        write_manifest(&manifest, &rows)?;
        ood_manifests.push(manifest);
    }

    Ok(SynthSummary {
        id_manifest,
        ood_manifests,
        files_written: files,
    })
}
