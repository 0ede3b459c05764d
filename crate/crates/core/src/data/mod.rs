//! Datasets of paired image and caption features.

mod encoder;
pub mod mvf;
pub mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::TokenFeatures;

pub use encoder::{toy_encode, ToyEncoder};
pub use mvf::{load_features, load_split, read_mvf, save_split, write_mvf};
pub use synth::{generate_synthetic, SynthAudit, SynthSpec, SyntheticCorpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub features: TokenFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub id: u64,
    pub image_id: u64,
    pub features: TokenFeatures,
    pub text: Option<String>,
}

/// Images and their captions for one split.
///
/// Invariants: ids are unique per modality, every caption points at an
/// existing image, every image has at least one caption, and feature widths
/// agree within each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    images: Vec<ImageRecord>,
    captions: Vec<CaptionRecord>,
    image_pos: HashMap<u64, usize>,
    caption_image: Vec<usize>,
}

impl Dataset {
    pub fn new(split: Split, images: Vec<ImageRecord>, captions: Vec<CaptionRecord>) -> Result<Self> {
        let mut image_pos = HashMap::with_capacity(images.len());
        for (pos, img) in images.iter().enumerate() {
            if image_pos.insert(img.id, pos).is_some() {
                return Err(Error::Invalid(format!("duplicate image id {}", img.id)));
            }
        }
        let mut seen_captions = HashMap::with_capacity(captions.len());
        let mut caption_image = Vec::with_capacity(captions.len());
        let mut caption_count = vec![0usize; images.len()];
        for cap in &captions {
            if seen_captions.insert(cap.id, ()).is_some() {
                return Err(Error::Invalid(format!("duplicate caption id {}", cap.id)));
            }
            let pos = *image_pos.get(&cap.image_id).ok_or_else(|| {
                Error::Invalid(format!("caption {} refers to unknown image {}", cap.id, cap.image_id))
            })?;
            caption_count[pos] += 1;
            caption_image.push(pos);
        }
        if let Some(pos) = caption_count.iter().position(|&c| c == 0) {
            return Err(Error::Invalid(format!("image {} has no captions", images[pos].id)));
        }
        check_uniform_width(images.iter().map(|i| (i.id, &i.features)), "image")?;
        check_uniform_width(captions.iter().map(|c| (c.id, &c.features)), "caption")?;
        Ok(Dataset {
            split,
            images,
            captions,
            image_pos,
            caption_image,
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn captions(&self) -> &[CaptionRecord] {
        &self.captions
    }

    pub fn image_position(&self, id: u64) -> Option<usize> {
        self.image_pos.get(&id).copied()
    }

    pub fn caption_position(&self, id: u64) -> Option<usize> {
        self.captions.iter().position(|c| c.id == id)
    }

    /// Position of the image that caption `caption_pos` describes.
    pub fn image_of_caption(&self, caption_pos: usize) -> usize {
        self.caption_image[caption_pos]
    }

    pub fn image_dim(&self) -> Option<usize> {
        self.images.first().map(|i| i.features.dim())
    }

    pub fn caption_dim(&self) -> Option<usize> {
        self.captions.first().map(|c| c.features.dim())
    }

    /// Positions of captions grouped by image position.
    pub fn captions_by_image(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.images.len()];
        for (c, &img) in self.caption_image.iter().enumerate() {
            groups[img].push(c);
        }
        groups
    }
}

fn check_uniform_width<'a>(
    items: impl Iterator<Item = (u64, &'a TokenFeatures)>,
    what: &str,
) -> Result<()> {
    let mut width = None;
    for (id, tf) in items {
        match width {
            None => width = Some(tf.dim()),
            Some(w) if w != tf.dim() => {
                return Err(Error::shape(
                    "Dataset::new",
                    format!("{what} {id} has width {}, earlier {what}s have {w}", tf.dim()),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Training split plus the held-out splits used for model selection and
/// reporting.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

impl Corpus {
    pub fn new(train: Dataset, val: Dataset, test: Option<Dataset>) -> Result<Self> {
        let dims = |d: &Dataset| (d.image_dim(), d.caption_dim());
        for other in std::iter::once(&val).chain(test.as_ref()) {
            if dims(other) != dims(&train) {
                return Err(Error::shape(
                    "Corpus::new",
                    format!(
                        "{} split widths {:?} differ from train {:?}",
                        other.split.name(),
                        dims(other),
                        dims(&train)
                    ),
                ));
            }
        }
        Ok(Corpus { train, val, test })
    }

    pub fn split(&self, split: Split) -> Option<&Dataset> {
        match split {
            Split::Train => Some(&self.train),
            Split::Val => Some(&self.val),
            Split::Test => self.test.as_ref(),
        }
    }
}
