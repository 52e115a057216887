//! Loading posed, light-tagged captures.

use std::path::{Path, PathBuf};

use super::schema::{read_json, DatasetMeta, TransformsFile};
use crate::camera::Camera;
use crate::envlight::LightAngleTable;
use crate::error::{Error, Result};
use crate::image::{load_linear, ImageBuffer};

#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    /// Linear RGBA; alpha is the object mask (1 when the file has none).
    pub image: ImageBuffer,
    pub camera: Camera,
    pub angle_deg: f64,
    /// Index into the dataset's light table. Test frames whose light was
    /// dropped by [`Dataset::restrict_lights`] carry `None`.
    pub k: Option<usize>,
}

impl Frame {
    pub fn mask(&self, i: usize) -> bool {
        self.image.alpha_at(i) > 0.5
    }

    pub fn rgb(&self, i: usize) -> [f64; 3] {
        self.image.rgb_at(i)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
    pub lights: LightAngleTable,
    pub meta: Option<DatasetMeta>,
}

fn to_rgba(img: ImageBuffer) -> Result<ImageBuffer> {
    match img.channels {
        4 => Ok(img),
        3 | 1 => {
            let mut out = ImageBuffer::new(img.width, img.height, 4)?;
            for i in 0..img.pixel_count() {
                out.data[i * 4..i * 4 + 3].copy_from_slice(&img.rgb_at(i));
                out.data[i * 4 + 3] = 1.0;
            }
            Ok(out)
        }
        c => Err(Error::Dataset(format!("unsupported channel count {c}"))),
    }
}

fn read_split(root: &Path, name: &str, required: bool) -> Result<Vec<(String, ImageBuffer, Camera, Option<f64>)>> {
    let path = root.join(format!("transforms_{name}.json"));
    if !path.exists() {
        if required {
            return Err(Error::Dataset(format!("missing {}", path.display())));
        }
        return Ok(Vec::new());
    }
    let t: TransformsFile = read_json(&path)?;
    let mut out = Vec::with_capacity(t.frames.len());
    for f in &t.frames {
        let rel = f.file_path.trim_start_matches("./");
        let img = to_rgba(load_linear(&root.join(rel))?)?;
        let cam = Camera::from_nerf(&f.transform_matrix, t.camera_angle_x, img.width, img.height)?;
        out.push((rel.to_string(), img, cam, f.light_angle_deg));
    }
    Ok(out)
}

fn canonical_deg(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r >= 360.0 - 1e-9 {
        0.0
    } else {
        r
    }
}

/// Reads `transforms_train.json` (required) and `transforms_test.json`
/// from `dir`. Frames without `light_angle_deg` are taken at 0 degrees; the
/// light table holds the distinct angles in ascending order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let train = read_split(dir, "train", true)?;
    let test = read_split(dir, "test", false)?;
    if train.is_empty() {
        return Err(Error::Dataset("no training frames".into()));
    }
    let (w, h) = (train[0].1.width, train[0].1.height);
    let mut missing = 0;
    let mut angles: Vec<f64> = Vec::new();
    for (name, img, _, a) in train.iter().chain(&test) {
        if img.width != w || img.height != h {
            return Err(Error::Dataset(format!("{name}: {}x{} differs from {w}x{h}", img.width, img.height)));
        }
        if a.is_none() {
            missing += 1;
        }
        let d = canonical_deg(a.unwrap_or(0.0));
        if !angles.iter().any(|x| (x - d).abs() < 1e-9) {
            angles.push(d);
        }
    }
    if missing > 0 {
        log::warn!("{missing} frames carry no light_angle_deg; using 0 degrees");
    }
    angles.sort_by(f64::total_cmp);
    let lights = LightAngleTable::from_degrees(&angles)?;
    let index = |a: Option<f64>| {
        let d = canonical_deg(a.unwrap_or(0.0));
        angles.iter().position(|x| (x - d).abs() < 1e-9)
    };
    let frames = |v: Vec<(String, ImageBuffer, Camera, Option<f64>)>| -> Vec<Frame> {
        v.into_iter()
            .map(|(name, image, camera, a)| Frame {
                k: index(a),
                angle_deg: canonical_deg(a.unwrap_or(0.0)),
                name,
                image,
                camera,
            })
            .collect()
    };
    let meta_path = dir.join("scene.json");
    let meta = if meta_path.exists() { Some(read_json(&meta_path)?) } else { None };
    Ok(Dataset { root: dir.to_path_buf(), train: frames(train), test: frames(test), lights, meta })
}

impl Dataset {
    pub fn k_count(&self) -> usize {
        self.lights.len()
    }

    pub fn width(&self) -> usize {
        self.train[0].image.width
    }

    pub fn height(&self) -> usize {
        self.train[0].image.height
    }

    /// Keeps only training frames lit by the given light indices and
    /// renumbers lights in the given order.
    pub fn restrict_lights(&self, ks: &[usize]) -> Result<Dataset> {
        let lights = self.lights.subset(ks)?;
        let remap = |k: Option<usize>| k.and_then(|k| ks.iter().position(|&x| x == k));
        let train: Vec<Frame> = self
            .train
            .iter()
            .filter(|f| remap(f.k).is_some())
            .map(|f| Frame { k: remap(f.k), ..f.clone() })
            .collect();
        if train.is_empty() {
            return Err(Error::Dataset(format!("no training frames under lights {ks:?}")));
        }
        let test = self.test.iter().map(|f| Frame { k: remap(f.k), ..f.clone() }).collect();
        Ok(Dataset { root: self.root.clone(), train, test, lights, meta: self.meta.clone() })
    }

    /// Scene extent from the metadata, or the spread of camera centers.
    pub fn extent(&self) -> f64 {
        if let Some(m) = &self.meta {
            return m.extent;
        }
        let b = crate::math::Aabb::from_points(self.train.iter().map(|f| f.camera.center()));
        b.extent().max_component().max(1e-3) * 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{gen_dataset, GenConfig, PathTraceConfig};
    use crate::pipeline::schema::{write_json, FrameEntry};

    fn tiny(dir: &Path, angles: Vec<f64>) {
        let cfg = GenConfig {
            scene: "shadow-box".into(),
            angles_deg: angles,
            views_per_angle: 2,
            n_test: 3,
            width: 8,
            height: 6,
            path: PathTraceConfig { spp: 2, max_bounces: 1, ..Default::default() },
            gt_ao_samples: 4,
            ..Default::default()
        };
        gen_dataset(&cfg, dir).unwrap();
    }

    #[test]
    fn three_lights_round_trip_from_the_generator() {
        let d = tempfile::tempdir().unwrap();
        tiny(d.path(), vec![0.0, 120.0, 240.0]);
        let ds = load_dataset(d.path()).unwrap();
        assert_eq!(ds.k_count(), 3);
        assert_eq!(ds.lights.degrees().iter().map(|v| v.round()).collect::<Vec<_>>(), vec![0.0, 120.0, 240.0]);
        assert_eq!(ds.train.len(), 6);
        assert_eq!(ds.test.len(), 3);
        assert_eq!(ds.train.iter().map(|f| f.k.unwrap()).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(ds.train[0].image.channels, 4);
        let sub = ds.restrict_lights(&[0]).unwrap();
        assert_eq!(sub.k_count(), 1);
        assert_eq!(sub.train.len(), 2);
        assert_eq!(sub.test.iter().map(|f| f.k).collect::<Vec<_>>(), vec![Some(0), None, None]);
    }

    #[test]
    fn untagged_frames_default_to_a_single_light() {
        let d = tempfile::tempdir().unwrap();
        tiny(d.path(), vec![90.0]);
        for split in ["train", "test"] {
            let p = d.path().join(format!("transforms_{split}.json"));
            let mut t: TransformsFile = read_json(&p).unwrap();
            t.frames = t.frames.into_iter().map(|f| FrameEntry { light_angle_deg: None, ..f }).collect();
            write_json(&p, &t).unwrap();
        }
        let ds = load_dataset(d.path()).unwrap();
        assert_eq!(ds.k_count(), 1);
        assert_eq!(ds.lights.angle(0).unwrap(), 0.0);
    }

    #[test]
    fn missing_transforms_is_a_dataset_error() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(d.path()), Err(Error::Dataset(_))));
    }
}
