//! Synthetic day/night detection dataset.
//!
//! Day scenes are a textured grey background with a few bright rectangular
//! "vehicles". Night renditions darken with a gamma curve, apply a blue-leaning
//! colour cast and add Gaussian noise:
//!
//! `night = clamp(exposure · day^gamma · cast + N(0, noise²))`
//!
//! Every image comes from its own sub-seed, so the output is a pure function of
//! the configuration.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{BBox, BoxSet};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::io::{create_dir_all, write_atomic, write_image};
use crate::manifest::{boxes_to_rows, write_manifest, ManifestRecord};
use crate::rng::{stream, sub_seed, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NightModel {
    pub exposure: f64,
    pub gamma: f64,
    pub cast: [f64; 3],
    pub noise: f64,
}

impl Default for NightModel {
    fn default() -> Self {
        Self {
            exposure: 0.4,
            gamma: 2.2,
            cast: [0.75, 0.9, 1.2],
            noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Day training images; the test split has `n_images / 4` scenes.
    pub n_images: usize,
    pub size: usize,
    pub n_styles: usize,
    pub night: NightModel,
    /// Relative jitter of exposure and cast across style references.
    pub style_jitter: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            size: 64,
            n_styles: 5,
            night: NightModel::default(),
            style_jitter: 0.15,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!("toy images must be at least 32 px, got {}", self.size)));
        }
        let n = &self.night;
        if !(n.exposure > 0.0 && n.gamma > 0.0 && n.noise >= 0.0 && n.cast.iter().all(|c| *c > 0.0)) {
            return Err(Error::Config("night model parameters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.style_jitter) {
            return Err(Error::Config("style_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn n_test(&self) -> usize {
        self.n_images / 4
    }
}

#[derive(Debug, Clone)]
pub struct ToyScene {
    pub id: String,
    pub day: Image,
    pub night: Image,
    pub gt: BoxSet,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub train: Vec<ToyScene>,
    pub test: Vec<ToyScene>,
    pub styles: Vec<Image>,
}

const MIN_W: usize = 10;
const MAX_W: usize = 22;
const MIN_H: usize = 10;
const MAX_H: usize = 18;

fn place_boxes(rng: &mut StreamRng, size: usize) -> Vec<(usize, usize, usize, usize)> {
    let want = rng.random_range(1..=3);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..50 {
        if placed.len() == want {
            break;
        }
        let w = rng.random_range(MIN_W..=MAX_W);
        let h = rng.random_range(MIN_H..=MAX_H);
        let x = rng.random_range(1..size - w);
        let y = rng.random_range(1..size - h);
        let clear = placed
            .iter()
            .all(|&(px, py, pw, ph)| x + w + 2 <= px || px + pw + 2 <= x || y + h + 2 <= py || py + ph + 2 <= y);
        if clear {
            placed.push((x, y, w, h));
        }
    }
    placed
}

/// A day scene and its boxes.
pub fn day_scene(size: usize, seed: u64) -> (Image, BoxSet) {
    let mut rng = stream(seed);
    let base = rng.random_range(0.3..0.5);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let (fx, fy, phase) = (
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let grain = Normal::new(0.0, 0.015).expect("valid sigma");
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let wave = 0.05 * ((fx * x as f64 + phase).sin() + (fy * y as f64 - phase).cos());
            let g = grain.sample(&mut rng);
            for c in 0..3 {
                data[(y * size + x) * 3 + c] = base + tint[c] + wave + g;
            }
        }
    }
    let rects = place_boxes(&mut rng, size);
    let mut boxes = Vec::with_capacity(rects.len());
    for &(x0, y0, w, h) in &rects {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..0.95));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let windshield = y >= y0 + 2 && y < y0 + 5 && x >= x0 + 2 && x + 2 < x0 + w;
                for c in 0..3 {
                    data[(y * size + x) * 3 + c] = if windshield { 0.2 } else { colour[c] };
                }
            }
        }
        boxes.push(BBox {
            x1: x0 as f64,
            y1: y0 as f64,
            x2: (x0 + w) as f64,
            y2: (y0 + h) as f64,
        });
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let n = boxes.len();
    let image = Image::new(size, size, 3, data).expect("generated values are finite");
    (image, BoxSet::ground_truth(boxes, vec![0; n]).expect("generated boxes are valid"))
}

/// Applies the night model to a day image.
pub fn render_night(day: &Image, model: &NightModel, seed: u64) -> Result<Image> {
    if day.channels() != 3 {
        return Err(Error::Argument("night rendering needs an RGB image".into()));
    }
    let mut rng = stream(seed);
    let noise = Normal::new(0.0, model.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = day.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let dark = model.exposure * v.max(0.0).powf(model.gamma) * model.cast[i % 3];
        *v = (dark + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

fn scene(cfg: &ToyConfig, split: u64, index: usize) -> Result<ToyScene> {
    let seed = sub_seed(sub_seed(cfg.seed, split), index as u64);
    let (day, gt) = day_scene(cfg.size, sub_seed(seed, 0));
    let night = render_night(&day, &cfg.night, sub_seed(seed, 1))?;
    let id = format!("{index:04}");
    Ok(ToyScene {
        day: day.with_id(id.clone()),
        night: night.with_id(id.clone()),
        id,
        gt,
    })
}

/// Night renditions of unrelated scenes under jittered night models.
fn style_reference(cfg: &ToyConfig, index: usize) -> Result<Image> {
    let seed = sub_seed(sub_seed(cfg.seed, 3), index as u64);
    let (day, _) = day_scene(cfg.size, sub_seed(seed, 0));
    let mut rng = stream(sub_seed(seed, 2));
    let j = cfg.style_jitter;
    let mut model = cfg.night;
    model.exposure *= 1.0 + rng.random_range(-j..=j);
    for c in &mut model.cast {
        *c *= 1.0 + rng.random_range(-j..=j);
    }
    Ok(render_night(&day, &model, sub_seed(seed, 1))?.with_id(format!("style_{index}")))
}

pub fn generate(cfg: &ToyConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    Ok(ToyDataset {
        train: (0..cfg.n_images).map(|i| scene(cfg, 1, i)).collect::<Result<_>>()?,
        test: (0..cfg.n_test()).map(|i| scene(cfg, 2, i)).collect::<Result<_>>()?,
        styles: (0..cfg.n_styles).map(|i| style_reference(cfg, i)).collect::<Result<_>>()?,
        config: cfg.clone(),
    })
}

impl ToyDataset {
    /// Writes images, manifests and `dataset.json` under `dir`:
    ///
    /// ```text
    /// day_train/ night_train/ day_test/ night_test/ styles/
    /// day_train.jsonl night_train.jsonl day_test.jsonl night_test.jsonl
    /// dataset.json
    /// ```
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, scenes, night) in [
            ("day_train", &self.train, false),
            ("night_train", &self.train, true),
            ("day_test", &self.test, false),
            ("night_test", &self.test, true),
        ] {
            create_dir_all(&dir.join(name))?;
            let mut records = Vec::with_capacity(scenes.len());
            for s in scenes {
                let rel = format!("{name}/{}.png", s.id);
                write_image(if night { &s.night } else { &s.day }, dir.join(&rel))?;
                records.push(ManifestRecord {
                    image: rel,
                    boxes: boxes_to_rows(&s.gt),
                });
            }
            write_manifest(dir.join(format!("{name}.jsonl")), &records)?;
        }
        create_dir_all(&dir.join("styles"))?;
        for (i, s) in self.styles.iter().enumerate() {
            write_image(s, dir.join(format!("styles/style_{i}.png")))?;
        }
        let meta = serde_json::to_string_pretty(&self.config).expect("config serializes");
        write_atomic(dir.join("dataset.json"), meta.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_are_inside_and_large_enough() {
        for seed in 0..200 {
            let (img, gt) = day_scene(64, seed);
            assert!(!gt.is_empty());
            for b in &gt.boxes {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                assert!(b.area() >= 64.0);
            }
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn night_is_darker_and_deterministic() {
        let cfg = ToyConfig {
            n_images: 4,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train[0].night, b.train[0].night);
        assert_eq!(a.test.len(), 1);
        assert_eq!(a.styles.len(), 5);
        for s in &a.train {
            assert!(s.night.mean() < 0.5 * s.day.mean());
        }
    }

    #[test]
    fn empty_dataset_writes_valid_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            n_images: 0,
            ..Default::default()
        };
        generate(&cfg).unwrap().write(dir.path()).unwrap();
        let m = crate::manifest::read_manifest(dir.path().join("day_train.jsonl")).unwrap();
        assert!(m.is_empty());
        assert!(dir.path().join("dataset.json").is_file());
    }
}
