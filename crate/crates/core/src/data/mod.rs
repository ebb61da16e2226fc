//! Dataset ingestion: manifest parsing, image decoding and resizing,
//! training-time augmentation, and the synthetic dataset generator.

pub mod netpbm;
pub mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Calib,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calib => "calib",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "calib" => Ok(Split::Calib),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest row: relative image path, class label (`None` for OOD data),
/// split assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub label: Option<usize>,
    pub split: Split,
}

pub const MANIFEST_HEADER: [&str; 3] = ["path", "label", "split"];

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "{}: expected header path,label,split",
                path.display()
            )));
        }
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if record.len() != 3 {
            return Err(Error::Manifest(format!(
                "{}: row {} has {} fields",
                path.display(),
                rows.len() + 1,
                record.len()
            )));
        }
        let rel = record[0].to_string();
        if !seen.insert(rel.clone()) {
            return Err(Error::Manifest(format!("duplicate path {rel:?}")));
        }
        let label = match &record[1] {
            "-" => None,
            text => Some(text.parse::<usize>().map_err(|_| {
                Error::Manifest(format!("bad label {text:?} for {rel:?}"))
            })?),
        };
        rows.push(ManifestRow {
            path: rel,
            label,
            split: Split::parse(&record[2])?,
        });
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::from("path,label,split\n");
    for row in rows {
        let label = match row.label {
            Some(l) => l.to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!("{},{},{}\n", row.path, label, row.split.as_str()));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A decoded image ready for the model: pixels scaled to [0,1], NCHW.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Tensor,
    pub label: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub split: Split,
    pub sample: ImageSample,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn of_split(&self, split: Split) -> Vec<&ImageSample> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| &e.sample)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn pnm_to_tensor(img: &netpbm::PnmImage) -> Tensor {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut data = vec![0.0f32; c * h * w];
    // interleaved u8 -> planar f32 in [0,1]
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] =
                    img.pixels[(y * w + x) * c + ch] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[1, c, h, w], data).expect("decoded image shape is valid")
}

/// Tensor (1,C,H,W) -> interleaved u8 raster, rounding to the nearest level.
pub fn tensor_to_pnm(t: &Tensor) -> Result<netpbm::PnmImage> {
    if t.rank() != 4 || t.shape()[0] != 1 || !matches!(t.shape()[1], 1 | 3) {
        return Err(Error::invalid(
            "tensor_to_pnm",
            format!("expected (1,1|3,H,W), got {:?}", t.shape()),
        ));
    }
    let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let data = t.data();
    let mut pixels = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = data[(ch * h + y) * w + x].clamp(0.0, 1.0);
                pixels[(y * w + x) * c + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    Ok(netpbm::PnmImage {
        channels: c,
        width: w,
        height: h,
        pixels,
    })
}

/// General bilinear resampling (up or down), align-corners-false, applied
/// per channel.
pub fn resize_bilinear(t: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    if t.rank() != 4 {
        return Err(Error::invalid(
            "resize_bilinear",
            format!("expected rank-4 tensor, got {:?}", t.shape()),
        ));
    }
    let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    if th == 0 || tw == 0 {
        return Err(Error::invalid("resize_bilinear", "target must be non-empty"));
    }
    if (h, w) == (th, tw) {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut out = vec![0.0f32; n * c * th * tw];
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for ni in 0..n {
        for ch in 0..c {
            let plane = &src[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
            let dst = &mut out[(ni * c + ch) * th * tw..(ni * c + ch + 1) * th * tw];
            for y in 0..th {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let dy = fy - y0 as f64;
                for x in 0..tw {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let dx = fx - x0 as f64;
                    let v = plane[y0 * w + x0] as f64 * (1.0 - dy) * (1.0 - dx)
                        + plane[y0 * w + x1] as f64 * (1.0 - dy) * dx
                        + plane[y1 * w + x0] as f64 * dy * (1.0 - dx)
                        + plane[y1 * w + x1] as f64 * dy * dx;
                    dst[y * tw + x] = v as f32;
                }
            }
        }
    }
    drop(src);
    Tensor::new(&[n, c, th, tw], out)
}

/// Load every manifest row into memory. Paths are resolved against `root`.
/// Images are resized to `input_size` and must match `channels`; labels must
/// be below `num_classes` when given.
pub fn load_dataset(
    root: &Path,
    manifest_path: &Path,
    channels: usize,
    input_size: usize,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let rows = read_manifest(manifest_path)?;
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        if let (Some(label), Some(c)) = (row.label, num_classes) {
            if label >= c {
                return Err(Error::Manifest(format!(
                    "label {label} out of range for {c} classes ({})",
                    row.path
                )));
            }
        }
        let full: PathBuf = root.join(&row.path);
        let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
        let img = netpbm::decode(&bytes)?;
        if img.channels != channels {
            return Err(Error::invalid(
                "load_dataset",
                format!(
                    "{}: expected {channels} channel(s), file has {}",
                    row.path, img.channels
                ),
            ));
        }
        let mut pixels = pnm_to_tensor(&img);
        if img.height != input_size || img.width != input_size {
            pixels = resize_bilinear(&pixels, input_size, input_size)?;
        }
        entries.push(DatasetEntry {
            split: row.split,
            sample: ImageSample {
                id: row.path,
                pixels,
                label: row.label,
            },
        });
    }
    Ok(Dataset { entries })
}

/// Deterministic augmentation core: optional horizontal flip, then a
/// brightness factor with clamping to [0,1].
pub fn augment_with(sample: &ImageSample, flip: bool, brightness: f32) -> ImageSample {
    let shape = sample.pixels.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let src = sample.pixels.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let v = src[(ch * h + y) * w + sx] * brightness;
                out[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    drop(src);
    ImageSample {
        id: sample.id.clone(),
        pixels: Tensor::new(&shape, out).expect("same shape"),
        label: sample.label,
    }
}

/// Training augmentation: flip with p=0.5, brightness uniform in [0.9, 1.1].
pub fn augment(sample: &ImageSample, rng: &mut SplitMix64) -> ImageSample {
    let flip = rng.coin();
    let brightness = rng.uniform(0.9, 1.1) as f32;
    augment_with(sample, flip, brightness)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_sample(values: &[f32], h: usize, w: usize) -> ImageSample {
        ImageSample {
            id: "t".into(),
            pixels: Tensor::new(&[1, 1, h, w], values.to_vec()).unwrap(),
            label: Some(0),
        }
    }

    #[test]
    fn augment_identity_branch() {
        let s = gray_sample(&[0.1, 0.5, 0.9, 0.3], 2, 2);
        let out = augment_with(&s, false, 1.0);
        assert_eq!(out.pixels.to_vec(), s.pixels.to_vec());
    }

    #[test]
    fn double_flip_is_identity() {
        let s = gray_sample(&[0.1, 0.5, 0.9, 0.3, 0.2, 0.7], 2, 3);
        let once = augment_with(&s, true, 1.0);
        let twice = augment_with(&once, true, 1.0);
        assert_eq!(twice.pixels.to_vec(), s.pixels.to_vec());
    }

    #[test]
    fn brightness_clamps_at_one() {
        let s = gray_sample(&[1.0; 4], 2, 2);
        let out = augment_with(&s, false, 1.1);
        assert!(out.pixels.to_vec().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let t = Tensor::new(&[1, 1, 4, 4], vec![0.3; 16]).unwrap();
        for (th, tw) in [(8, 8), (3, 5), (4, 4), (32, 32)] {
            let r = resize_bilinear(&t, th, tw).unwrap();
            assert!(
                r.to_vec().iter().all(|&v| (v - 0.3).abs() < 1e-6),
                "{th}x{tw}"
            );
        }
    }

    #[test]
    fn resize_preserves_unit_range() {
        let mut rng = SplitMix64::new(5);
        let data: Vec<f32> = (0..64).map(|_| rng.next_f32()).collect();
        let t = Tensor::new(&[1, 1, 8, 8], data).unwrap();
        let r = resize_bilinear(&t, 13, 6).unwrap();
        assert!(r.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let rows = vec![
            ManifestRow { path: "images/a.pgm".into(), label: Some(0), split: Split::Train },
            ManifestRow { path: "images/b.pgm".into(), label: Some(1), split: Split::Calib },
            ManifestRow { path: "images/c.pgm".into(), label: None, split: Split::Test },
        ];
        write_manifest(&path, &rows).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);
    }

    #[test]
    fn manifest_rejects_duplicate_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "path,label,split\na.pgm,0,train\na.pgm,1,test\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn manifest_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "file,cls,part\na.pgm,0,train\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn load_scales_white_to_one() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        std::fs::write(
            dir.path().join("images/white.pgm"),
            netpbm::encode_pgm(4, 4, &[255u8; 16]),
        )
        .unwrap();
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, "path,label,split\nimages/white.pgm,0,train\n").unwrap();
        let ds = load_dataset(dir.path(), &manifest, 1, 4, Some(2)).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.entries[0]
            .sample
            .pixels
            .to_vec()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn load_rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.pgm"), netpbm::encode_pgm(2, 2, &[0; 4])).unwrap();
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, "path,label,split\na.pgm,5,train\n").unwrap();
        assert!(load_dataset(dir.path(), &manifest, 1, 2, Some(2)).is_err());
    }

    #[test]
    fn load_rejects_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, "path,label,split\nghost.pgm,0,train\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), &manifest, 1, 2, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_rejects_channel_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("rgb.ppm"),
            netpbm::encode_ppm(2, 2, &[0; 12]),
        )
        .unwrap();
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, "path,label,split\nrgb.ppm,0,train\n").unwrap();
        assert!(load_dataset(dir.path(), &manifest, 1, 2, None).is_err());
    }
}
