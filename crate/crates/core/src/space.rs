use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// One of the four latent spaces produced by the projection heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Global,
    Front,
    Side,
    Rear,
}

impl Space {
    pub const ALL: [Space; 4] = [Space::Global, Space::Front, Space::Side, Space::Rear];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Space::Global => "global",
            Space::Front => "front",
            Space::Side => "side",
            Space::Rear => "rear",
        }
    }

    /// The visible side this space compares, `None` for the global space.
    pub fn view(self) -> Option<View> {
        match self {
            Space::Global => None,
            Space::Front => Some(View::Front),
            Space::Side => Some(View::Side),
            Space::Rear => Some(View::Rear),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Space::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::MalformedFile(format!("unknown space {s:?}")))
    }
}

/// A visible side of the object. Declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Front,
    Side,
    Rear,
}

impl View {
    pub const ALL: [View; 3] = [View::Front, View::Side, View::Rear];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn space(self) -> Space {
        match self {
            View::Front => Space::Front,
            View::Side => Space::Side,
            View::Rear => Space::Rear,
        }
    }

    pub fn name(self) -> &'static str {
        self.space().name()
    }
}

/// Four unit vectors, one per latent space, all of the same dimension.
///
/// An all-zero vector marks a degenerate projection (the pre-normalization
/// output had norm below [`linalg::NORM_FLOOR`]).
#[derive(Debug, Clone, PartialEq)]
pub struct PerSpaceEmbeddings {
    spaces: [Vec<f64>; 4],
}

impl PerSpaceEmbeddings {
    pub fn new(spaces: [Vec<f64>; 4]) -> Result<Self> {
        let dim = spaces[0].len();
        for v in &spaces[1..] {
            Error::check_dim(dim, v.len())?;
        }
        Ok(Self { spaces })
    }

    /// Normalizes each of the four raw vectors.
    pub fn from_raw(raw: [Vec<f64>; 4]) -> Result<Self> {
        Self::new(raw.map(|v| linalg::normalize(&v).0))
    }

    pub fn dim(&self) -> usize {
        self.spaces[0].len()
    }

    pub fn get(&self, space: Space) -> &[f64] {
        &self.spaces[space.index()]
    }

    pub fn get_mut(&mut self, space: Space) -> &mut Vec<f64> {
        &mut self.spaces[space.index()]
    }

    pub fn is_degenerate(&self, space: Space) -> bool {
        linalg::is_zero(self.get(space))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Space, &[f64])> {
        Space::ALL.into_iter().map(move |s| (s, self.get(s)))
    }

    pub fn into_inner(self) -> [Vec<f64>; 4] {
        self.spaces
    }

    /// Copy with every component rounded to `f32` precision.
    pub fn quantized(&self) -> Self {
        Self {
            spaces: std::array::from_fn(|i| linalg::quantize_f32(&self.spaces[i])),
        }
    }
}
