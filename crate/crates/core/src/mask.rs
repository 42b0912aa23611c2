//! Binary foreground/side masks and the viewpoint area ratios derived from
//! them.
//!
//! Two on-disk encodings are accepted, detected by magic:
//!
//! - binary PGM (`P5`, maxval 255),
//! - raw `MSK1 <width> <height>\n` followed by `width × height` bytes.
//!
//! Pixels `>= 128` are foreground.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::View;

pub const BINARIZE_THRESHOLD: u8 = 128;

/// Tolerance on `front + side + rear <= 1` for disjoint side masks.
pub const RATIO_SUM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::MalformedFile(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        Error::check_dim(width * height, bits.len())?;
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    /// Binarizes 8-bit pixels at [`BINARIZE_THRESHOLD`].
    pub fn from_gray(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(width, height, pixels.iter().map(|&p| p >= BINARIZE_THRESHOLD).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch {
                expected: self.bits.len(),
                got: other.bits.len(),
            });
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask { bits, ..*self })
    }

    /// Encodes as binary PGM with values 0/255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn to_msk1(&self) -> Vec<u8> {
        let mut out = format!("MSK1 {} {}\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Parses either mask encoding from raw bytes.
pub fn parse_mask(bytes: &[u8]) -> Result<BinaryMask> {
    if bytes.starts_with(b"P5") {
        parse_pgm(bytes)
    } else if bytes.starts_with(b"MSK1") {
        parse_msk1(bytes)
    } else {
        Err(Error::MalformedFile("unrecognized mask magic".into()))
    }
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_mask(&bytes).map_err(|e| match e {
        Error::MalformedFile(msg) => Error::MalformedFile(format!("{}: {msg}", path.display())),
        other => other,
    })
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedFile(format!("bad {what} in mask header")))
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::MalformedFile(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::MalformedFile("truncated PGM header".into())),
    }
    raster(width, height, &bytes[cur.pos..])
}

fn parse_msk1(bytes: &[u8]) -> Result<BinaryMask> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedFile("MSK1 header missing newline".into()))?;
    let header =
        std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::MalformedFile("MSK1 header is not UTF-8".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let [_, w, h] = fields.as_slice() else {
        return Err(Error::MalformedFile(format!("bad MSK1 header {header:?}")));
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::MalformedFile(format!("bad MSK1 dimension {s:?}")))
    };
    raster(parse(w)?, parse(h)?, &bytes[newline + 1..])
}

fn raster(width: usize, height: usize, data: &[u8]) -> Result<BinaryMask> {
    if width == 0 || height == 0 {
        return Err(Error::MalformedFile(format!(
            "mask dimensions must be positive, got {width}x{height}"
        )));
    }
    if data.len() != width * height {
        return Err(Error::MalformedFile(format!(
            "expected {} pixel bytes for {width}x{height}, found {}",
            width * height,
            data.len()
        )));
    }
    BinaryMask::from_gray(width, height, data)
}

/// Foreground plus the three side masks of one detection crop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub foreground: BinaryMask,
    pub front: BinaryMask,
    pub side: BinaryMask,
    pub rear: BinaryMask,
}

impl MaskSet {
    pub fn view(&self, view: View) -> &BinaryMask {
        match view {
            View::Front => &self.front,
            View::Side => &self.side,
            View::Rear => &self.rear,
        }
    }

    fn check_shapes(&self) -> Result<()> {
        for view in View::ALL {
            let m = self.view(view);
            if !m.same_shape(&self.foreground) {
                return Err(Error::DimensionMismatch {
                    expected: self.foreground.bits.len(),
                    got: m.bits.len(),
                });
            }
        }
        Ok(())
    }

    /// Paths of the four mask files for a sample stem.
    pub fn paths(dir: &Path, stem: &str) -> [PathBuf; 4] {
        ["fg", "front", "side", "rear"].map(|kind| dir.join(format!("{stem}.{kind}.pgm")))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<MaskSet> {
        let [fg, front, side, rear] = Self::paths(dir, stem);
        let set = MaskSet {
            foreground: load_mask(&fg)?,
            front: load_mask(&front)?,
            side: load_mask(&side)?,
            rear: load_mask(&rear)?,
        };
        set.check_shapes()?;
        Ok(set)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let [fg, front, side, rear] = Self::paths(dir, stem);
        self.foreground.save_pgm(&fg)?;
        self.front.save_pgm(&front)?;
        self.side.save_pgm(&side)?;
        self.rear.save_pgm(&rear)
    }
}

/// Replaces each side mask by its pixelwise AND with the foreground.
pub fn clamp_to_foreground(set: MaskSet) -> Result<MaskSet> {
    set.check_shapes()?;
    Ok(MaskSet {
        front: set.front.and(&set.foreground)?,
        side: set.side.and(&set.foreground)?,
        rear: set.rear.and(&set.foreground)?,
        foreground: set.foreground,
    })
}

/// Fraction of the foreground covered by each visible side.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AreaRatios {
    pub front: f64,
    pub side: f64,
    pub rear: f64,
}

impl AreaRatios {
    pub fn new(front: f64, side: f64, rear: f64) -> Result<Self> {
        for (name, r) in [("front", front), ("side", side), ("rear", rear)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("{name} area ratio {r} outside [0, 1]")));
            }
        }
        Ok(Self { front, side, rear })
    }

    pub fn get(&self, view: View) -> f64 {
        match view {
            View::Front => self.front,
            View::Side => self.side,
            View::Rear => self.rear,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.front, self.side, self.rear]
    }

    pub fn sum(&self) -> f64 {
        self.front + self.side + self.rear
    }

    /// Side with the largest ratio; ties resolve front, then side, then rear.
    pub fn largest_view(&self) -> View {
        let mut best = View::Front;
        for view in [View::Side, View::Rear] {
            if self.get(view) > self.get(best) {
                best = view;
            }
        }
        best
    }
}

/// Whether overlapping side masks are rescaled so the ratios sum to at most 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Renormalize {
    #[default]
    Off,
    IfOverlapping,
}

/// `popcount(side) / popcount(foreground)` per side. The set must already be
/// clamped.
pub fn area_ratios(set: &MaskSet) -> Result<AreaRatios> {
    area_ratios_with(set, Renormalize::Off)
}

pub fn area_ratios_with(set: &MaskSet, renormalize: Renormalize) -> Result<AreaRatios> {
    set.check_shapes()?;
    let fg = set.foreground.popcount();
    if fg == 0 {
        return Err(Error::EmptyForeground);
    }
    let fg = fg as f64;
    let [front, side, rear] = View::ALL.map(|v| set.view(v).popcount() as f64 / fg);
    let mut ratios = AreaRatios { front, side, rear };
    if renormalize == Renormalize::IfOverlapping && ratios.sum() > 1.0 {
        let s = ratios.sum();
        ratios = AreaRatios {
            front: front / s,
            side: side / s,
            rear: rear / s,
        };
    }
    Ok(ratios)
}

/// Loads, clamps and measures the mask files of one sample.
pub fn load_area_ratios(dir: &Path, stem: &str) -> Result<AreaRatios> {
    area_ratios(&clamp_to_foreground(MaskSet::load(dir, stem)?)?)
}
