//! Multi-view samples: one 32x32 RGB crop per end device plus labels.

mod io;
mod ppm;
mod split;
mod synth;

pub use io::{load_dataset, write_dataset, INDEX_FILE};
pub use ppm::{decode_ppm, encode_ppm};
pub use split::{class_distribution, split, write_distribution_csv, ClassDistribution, DEFAULT_TRAIN_FRACTION};
pub use synth::{synth_generate, SynthParams, ViewTransform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = IMAGE_SIDE * IMAGE_SIDE * 3;
pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_DEVICES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["car", "bus", "person"];
/// Label of a device whose frame does not contain the object.
pub const ABSENT: i8 = -1;
pub const BLANK_LEVEL: u8 = 128;

/// Interleaved 8-bit RGB, row-major, 32x32.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    rgb: Vec<u8>,
}

impl Image {
    pub fn from_rgb(rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != IMAGE_BYTES {
            return Err(Error::InvalidArgument(format!(
                "image needs {} bytes, got {}",
                IMAGE_BYTES,
                rgb.len()
            )));
        }
        Ok(Self { rgb })
    }

    /// The all-grey stand-in for an absent object.
    pub fn blank() -> Self {
        Self {
            rgb: vec![BLANK_LEVEL; IMAGE_BYTES],
        }
    }

    pub fn is_blank(&self) -> bool {
        self.rgb.iter().all(|&b| b == BLANK_LEVEL)
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    /// Planar `3 x 32 x 32` floats scaled to `[-1, 1]` via `x / 127.5 - 1`.
    pub fn write_normalized<T: Scalar>(&self, out: &mut [T]) {
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[ch * plane + p] = T::of(px[ch] as f64 / 127.5 - 1.0);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiViewSample {
    pub id: String,
    pub views: Vec<Image>,
    /// Per device: the class index, or [`ABSENT`].
    pub device_labels: Vec<i8>,
    pub global_label: u8,
}

impl MultiViewSample {
    pub fn num_devices(&self) -> usize {
        self.views.len()
    }

    pub fn is_present(&self, device: usize) -> bool {
        self.device_labels[device] != ABSENT
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Sample {
            sample_id: self.id.clone(),
            reason,
        };
        if self.views.len() != self.device_labels.len() {
            return Err(fail(format!(
                "{} views but {} device labels",
                self.views.len(),
                self.device_labels.len()
            )));
        }
        if self.global_label as usize >= NUM_CLASSES {
            return Err(fail(format!("global label {} outside 0..=2", self.global_label)));
        }
        let mut present = 0;
        for (d, (&label, view)) in self.device_labels.iter().zip(&self.views).enumerate() {
            if !(ABSENT..NUM_CLASSES as i8).contains(&label) {
                return Err(fail(format!("device {} label {} outside -1..=2", d, label)));
            }
            if (label == ABSENT) != view.is_blank() {
                return Err(fail(format!(
                    "device {} label {} inconsistent with {} view",
                    d,
                    label,
                    if view.is_blank() { "blank" } else { "non-blank" }
                )));
            }
            if label != ABSENT {
                present += 1;
                if label as u8 != self.global_label {
                    return Err(fail(format!(
                        "device {} label {} disagrees with global label {}",
                        d, label, self.global_label
                    )));
                }
            }
        }
        if present == 0 {
            return Err(fail("object absent from every device".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<MultiViewSample>,
    pub class_names: [&'static str; NUM_CLASSES],
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(samples: Vec<MultiViewSample>, split_tag: SplitTag) -> Self {
        Self {
            samples,
            class_names: CLASS_NAMES,
            split_tag,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Device count shared by every sample (0 for an empty dataset).
    pub fn num_devices(&self) -> usize {
        self.samples.first().map_or(0, |s| s.num_devices())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.global_label as usize).collect()
    }

    pub fn find(&self, id: &str) -> Option<&MultiViewSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}
