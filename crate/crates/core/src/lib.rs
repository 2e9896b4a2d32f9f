//! Natural / GAN / computer-graphics image classification from fused
//! multi-colorspace features.
//!
//! Each image runs through three pre-processing branches (RGB, LCH, HSV; see
//! [`preprocess`]), each branch through the same frozen [`backbone`], and the
//! three 1280-wide pooled features are concatenated into a 3840-wide vector
//! classified by a 3-class softmax head ([`fusionhead`]), the only trainable
//! part. [`evalkit`] holds metrics, splitting, the JPEG robustness sweep, the
//! Stuart-Maxwell test and t-SNE; [`explain`] computes class activation maps.

pub mod backbone;
pub mod colorspace;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod explain;
pub mod extractor;
pub mod fusionhead;
pub mod imageio;
pub mod preprocess;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// The three classes, indexed as the head outputs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "GAN")]
    Gan,
    Graphics,
    Real,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Gan, Class::Graphics, Class::Real];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Gan => "GAN",
            Class::Graphics => "Graphics",
            Class::Real => "Real",
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Class {
    type Err = Error;

    /// Accepts the class name (any case) or its index.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            return Class::from_index(i).ok_or_else(|| Error::format("label", format!("index {i} out of range")));
        }
        Class::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::format("label", format!("unknown class {s:?}")))
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::imageio::RawImage;
    use rand::{Rng, SeedableRng};

    pub fn noise_image(w: usize, h: usize, seed: u64) -> RawImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.gen()).collect();
        RawImage::new(w, h, data).unwrap()
    }
}
