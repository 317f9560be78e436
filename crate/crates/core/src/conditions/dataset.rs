//! ShapesWorld dataset generation and on-disk layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/scenes.jsonl               one {"index", "caption", "spec"} per line
//! <dir>/images/00000.png
//! <dir>/conditions/<kind>/00000.png
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extract::{make_color_palette, make_depth, make_segmentation, make_sketch, SEG_COLORS};
use super::render::render_scene;
use super::scene::{SceneSpec, Style};
use crate::adapter::{ConditionKind, ConditionMap};
use crate::codec::ImageTensor;
use crate::error::{Error, Result};
use crate::imageio::{load_rgb, save_gray, save_rgb, to_u8};
use crate::text::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub resolution: usize,
    pub seed: u64,
    pub style: Style,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { scenes: 2000, resolution: 128, seed: 0, style: Style::Light }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub scenes: usize,
    pub condition_kinds: Vec<ConditionKind>,
    pub seg_class_rule: String,
    pub seg_class_colors: Vec<[u8; 3]>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    index: usize,
    caption: String,
    spec: SceneSpec,
}

/// One scene and its image quantized to 8 bits (interleaved RGB).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub spec: SceneSpec,
    pub rgb: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    config: DatasetConfig,
    examples: Vec<Example>,
}

/// Generator for scene `index`: stream `index` of a generator seeded with `seed`.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

impl Dataset {
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        if config.scenes == 0 {
            return Err(Error::Invalid("dataset needs at least one scene".into()));
        }
        let examples = (0..config.scenes)
            .map(|i| {
                let spec = SceneSpec::random(&mut scene_rng(config.seed, i), config.style);
                let r = render_scene(&spec, config.resolution)?;
                Ok(Example { spec, rgb: r.image.to_rgb8(0) })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, examples })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn images(&self, idx: &[usize]) -> Result<ImageTensor> {
        let res = self.config.resolution;
        let items = idx
            .iter()
            .map(|&i| ImageTensor::from_rgb8(&self.examples[i].rgb, res, res))
            .collect::<Result<Vec<_>>>()?;
        ImageTensor::stack(&items.iter().collect::<Vec<_>>())
    }

    pub fn tokens(&self, idx: &[usize]) -> Result<Vec<TokenSequence>> {
        idx.iter().map(|&i| TokenSequence::from_caption(&self.examples[i].spec.caption())).collect()
    }

    /// Extracts `kind` conditions for the given scenes. Sketch and palette
    /// maps come from the stored 8-bit image, segmentation and depth from the
    /// scene masks.
    pub fn conditions(&self, kind: ConditionKind, idx: &[usize]) -> Result<ConditionMap> {
        match kind {
            ConditionKind::Sketch => Ok(make_sketch(&self.images(idx)?)),
            ConditionKind::Color => make_color_palette(&self.images(idx)?),
            ConditionKind::Segmentation | ConditionKind::Depth => {
                let maps = idx
                    .iter()
                    .map(|&i| {
                        let spec = &self.examples[i].spec;
                        let r = render_scene(spec, self.config.resolution)?;
                        if kind == ConditionKind::Depth {
                            make_depth(spec, &r)
                        } else {
                            make_segmentation(spec, &r)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                ConditionMap::stack(&maps.iter().collect::<Vec<_>>())
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        let res = self.config.resolution;
        fs::create_dir_all(dir.join("images"))?;
        for kind in ConditionKind::ALL {
            fs::create_dir_all(dir.join("conditions").join(kind.name()))?;
        }
        let mut jsonl = Vec::new();
        for (i, ex) in self.examples.iter().enumerate() {
            let rec = SceneRecord { index: i, caption: ex.spec.caption(), spec: ex.spec.clone() };
            serde_json::to_writer(&mut jsonl, &rec)?;
            jsonl.write_all(b"\n")?;
            let name = format!("{i:05}.png");
            save_rgb(&dir.join("images").join(&name), &ex.rgb, res, res)?;
            for kind in ConditionKind::ALL {
                let c = self.conditions(kind, &[i])?;
                let path = dir.join("conditions").join(kind.name()).join(&name);
                let d = c.tensor().data();
                if kind.channels() == 1 {
                    save_gray(&path, &d.iter().map(|&v| to_u8(v)).collect::<Vec<_>>(), res, res)?;
                } else {
                    let plane = res * res;
                    let rgb: Vec<u8> = (0..plane).flat_map(|p| [0, 1, 2].map(|ch| to_u8(d[ch * plane + p]))).collect();
                    save_rgb(&path, &rgb, res, res)?;
                }
            }
        }
        crate::checkpoint::write_atomic(&dir.join("scenes.jsonl"), &jsonl)?;
        let manifest = DatasetManifest {
            config: self.config.clone(),
            scenes: self.len(),
            condition_kinds: ConditionKind::ALL.to_vec(),
            seg_class_rule: "background = 0; primitive k with shape index s (circle 0, square 1, triangle 2) = 1 + 3k + s".into(),
            seg_class_colors: SEG_COLORS.to_vec(),
        };
        crate::checkpoint::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Loads scenes and images written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let res = manifest.config.resolution;
        let mut examples = Vec::with_capacity(manifest.scenes);
        for (i, line) in BufReader::new(fs::File::open(dir.join("scenes.jsonl"))?).lines().enumerate() {
            let rec: SceneRecord = serde_json::from_str(&line?)?;
            if rec.index != i {
                return Err(Error::Invalid(format!("scenes.jsonl line {i} has index {}", rec.index)));
            }
            rec.spec.validate()?;
            let (rgb, w, h) = load_rgb(&dir.join("images").join(format!("{i:05}.png")))?;
            if (w, h) != (res, res) {
                return Err(Error::Shape(format!("image {i} is {w}x{h}, expected {res}x{res}")));
            }
            examples.push(Example { spec: rec.spec, rgb });
        }
        if examples.len() != manifest.scenes {
            return Err(Error::Invalid(format!("manifest lists {} scenes, found {}", manifest.scenes, examples.len())));
        }
        Ok(Self { config: manifest.config, examples })
    }
}
