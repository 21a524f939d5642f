//! Synthetic turntable-style instance datasets, view augmentation, and the
//! task-stream splitter.

mod augment;
mod folder;
mod protocol;
mod render;

use serde::{Deserialize, Serialize};
use vinil_tensor::Tensor;

pub use augment::{augment, augment_batch, resized_crop, sample_crop, CropParams};
pub use folder::{assign_gallery_split, load_folder_dataset, read_ppm, save_folder_dataset, write_ppm};
pub use protocol::{split_protocol, ProtocolConfig, Task, TaskStream};
pub use render::{generate_dataset, instance_spec, InstanceSpec, Shape, BACKGROUND_POOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
}

/// One view of one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub category_id: usize,
    pub instance_id: usize,
    pub view_id: usize,
    pub split: Split,
}

/// Dataset look.
///
/// `SynthA` sweeps each instance through a dense rotation on a few
/// backgrounds, like a turntable rig. `SynthB` is hand-held: random pose,
/// jittered position and scale, any of the eleven backgrounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "synthA")]
    SynthA,
    #[serde(rename = "synthB")]
    SynthB,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::SynthA => "synthA",
            Preset::SynthB => "synthB",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthA" | "syntha" | "a" => Ok(Preset::SynthA),
            "synthB" | "synthb" | "b" => Ok(Preset::SynthB),
            other => Err(format!("unknown preset `{other}` (expected synthA or synthB)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub preset: Preset,
    pub seed: u64,
    pub n_categories: usize,
    pub instances_per_category: usize,
    pub views_per_instance: usize,
    pub image_size: usize,
    pub gallery_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            preset: Preset::SynthA,
            seed: 0,
            n_categories: 10,
            instances_per_category: 4,
            views_per_instance: 24,
            image_size: 32,
            gallery_fraction: 0.25,
        }
    }
}

pub const CHANNELS: usize = 3;

/// SplitMix64 finalizer; derives independent sub-seeds from a root seed.
pub(crate) fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
