//! Synthetic video benchmark whose classes are defined by temporal
//! dynamics: a bright square moves over a noisy background with one of
//! four directions at one of two speeds (8 classes), wrapping at the
//! borders. Single frames carry no class information beyond the square's
//! position; frame *order* is what separates the classes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Label, Tensor, VideoClip};

pub const DIRECTIONS: [(&str, i64, i64); 4] =
    [("up", -1, 0), ("down", 1, 0), ("left", 0, -1), ("right", 0, 1)];
pub const SPEEDS: [usize; 2] = [1, 2];
pub const NUM_CLASSES: usize = DIRECTIONS.len() * SPEEDS.len();

/// Human-readable class name, e.g. `right-1`.
pub fn class_name(label: Label) -> String {
    let (dir, _, _) = DIRECTIONS[label.0 / SPEEDS.len()];
    format!("{dir}-{}", SPEEDS[label.0 % SPEEDS.len()])
}

/// Direction vector (dy, dx) and speed in pixels/frame for a class.
pub fn class_motion(label: Label) -> (i64, i64, usize) {
    let (_, dy, dx) = DIRECTIONS[label.0 / SPEEDS.len()];
    (dy, dx, SPEEDS[label.0 % SPEEDS.len()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Uniform background noise amplitude; fresh per pixel per frame.
    pub noise_amp: f64,
    /// Side length of the moving square.
    pub square: usize,
    /// The square starts at the frame center jittered by up to ±jitter
    /// pixels on each axis.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            t: 12,
            h: 32,
            w: 32,
            c: 1,
            train_per_class: 32,
            eval_per_class: 8,
            noise_amp: 0.1,
            square: 7,
            jitter: 6,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t < 8 {
            return Err(Error::Spec(format!("need T >= 8, got {}", self.t)));
        }
        if self.h < 16 || self.w < 16 {
            return Err(Error::Spec(format!("need H,W >= 16, got {}x{}", self.h, self.w)));
        }
        let max_speed = *SPEEDS.iter().max().unwrap();
        if max_speed * self.t >= self.h.min(self.w) {
            return Err(Error::Spec(format!(
                "speed*T = {} must stay below min(H,W) = {} so motion does not lap the frame",
                max_speed * self.t,
                self.h.min(self.w)
            )));
        }
        if self.c == 0 || self.square == 0 {
            return Err(Error::Spec("channel count and square size must be positive".into()));
        }
        if self.square >= self.h.min(self.w) {
            return Err(Error::Spec("square must be smaller than the frame".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_amp) {
            return Err(Error::Spec("noise amplitude must lie in [0,1]".into()));
        }
        if self.train_per_class == 0 && self.eval_per_class == 0 {
            return Err(Error::Spec("dataset would be empty".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub label: Label,
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub clips: Vec<LabeledClip>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    /// (tensor, label) pairs of a split, in dataset order.
    pub fn pairs(&self, split: Split) -> Vec<(Tensor, Label)> {
        self.split(split)
            .map(|c| (c.clip.tensor().clone(), c.label))
            .collect()
    }
}

fn render_clip(spec: &DatasetSpec, label: Label, clip_seed: u64) -> VideoClip {
    let (dy, dx, speed) = class_motion(label);
    let mut rng = rng::stream(clip_seed, &[]);
    let j = spec.jitter as i64;
    let start_y = spec.h as i64 / 2 - spec.square as i64 / 2 + rng.gen_range(-j..=j);
    let start_x = spec.w as i64 / 2 - spec.square as i64 / 2 + rng.gen_range(-j..=j);
    let mut frames = Tensor::zeros(&spec.input_shape());
    for t in 0..spec.t {
        let fl = frames.frame_len();
        let frame = &mut frames.data_mut()[t * fl..(t + 1) * fl];
        if spec.noise_amp > 0.0 {
            for v in frame.iter_mut() {
                *v = spec.noise_amp * rng.gen::<f64>();
            }
        }
        let off = t as i64 * speed as i64;
        let top = start_y + dy * off;
        let leftmost = start_x + dx * off;
        for sy in 0..spec.square {
            let row = (top + sy as i64).rem_euclid(spec.h as i64) as usize;
            for sx in 0..spec.square {
                let col = (leftmost + sx as i64).rem_euclid(spec.w as i64) as usize;
                for ch in 0..spec.c {
                    frame[(row * spec.w + col) * spec.c + ch] = 1.0;
                }
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    VideoClip::new(frames).expect("generated clip is valid by construction")
}

/// Generates the labeled dataset. Pure given the spec (including its seed).
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut clips = Vec::new();
    for (split, count, tag) in [
        (Split::Train, spec.train_per_class, "train"),
        (Split::Eval, spec.eval_per_class, "eval"),
    ] {
        for class in 0..NUM_CLASSES {
            for idx in 0..count {
                let salt = [split as u64, class as u64, idx as u64];
                let clip_seed = rng::derive(spec.seed, &salt);
                let label = Label(class);
                clips.push(LabeledClip {
                    clip: render_clip(spec, label, clip_seed),
                    label,
                    id: format!("c{class}-{tag}-{idx:03}"),
                    split,
                });
            }
        }
    }
    Ok(Dataset { spec: spec.clone(), clips })
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    id: String,
    label: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    spec: DatasetSpec,
    classes: usize,
    clips: Vec<ClipMeta>,
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let manifest = DatasetManifest {
        spec: dataset.spec.clone(),
        classes: NUM_CLASSES,
        clips: dataset
            .clips
            .iter()
            .map(|c| ClipMeta { id: c.id.clone(), label: c.label.0, split: c.split })
            .collect(),
    };
    let records: Vec<(String, Tensor)> = dataset
        .clips
        .iter()
        .map(|c| (c.id.clone(), c.clip.tensor().clone()))
        .collect();
    container::save(path, "dataset", &manifest, &records)
}

pub fn load(path: &Path) -> Result<Dataset> {
    let (manifest, records): (DatasetManifest, _) = container::load(path, "dataset")?;
    if manifest.classes != NUM_CLASSES {
        return Err(Error::Format {
            offset: 16,
            reason: format!(
                "manifest declares {} classes, this build defines {NUM_CLASSES}",
                manifest.classes
            ),
        });
    }
    if manifest.clips.len() != records.len() {
        return Err(Error::Format {
            offset: 16,
            reason: format!(
                "manifest lists {} clips but {} tensor records present",
                manifest.clips.len(),
                records.len()
            ),
        });
    }
    let mut clips = Vec::with_capacity(records.len());
    for (meta, (name, tensor)) in manifest.clips.into_iter().zip(records) {
        if meta.id != name {
            return Err(Error::Format {
                offset: 16,
                reason: format!("clip {:?} does not match record {:?}", meta.id, name),
            });
        }
        if meta.label >= NUM_CLASSES {
            return Err(Error::Format {
                offset: 16,
                reason: format!("clip {:?} carries label {} >= {NUM_CLASSES}", meta.id, meta.label),
            });
        }
        clips.push(LabeledClip {
            clip: VideoClip::new(tensor)?,
            label: Label(meta.label),
            id: meta.id,
            split: meta.split,
        });
    }
    Ok(Dataset { spec: manifest.spec, clips })
}
