//! Images as points of the input space, `L_k` distances and pixel manipulations.
//!
//! An [`Image`] stores `width * height * channels` values in `[0, 1]`. The flat
//! layout is row-major with channels innermost, which is also the order in
//! which images are fed to classifiers.

mod pnm;

pub use pnm::{load_image, parse_pnm, save_image, write_pnm};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Two values closer than this are treated as equal by the `L0` distance.
pub const L0_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image shape {width}x{height}x{channels}")]
    InvalidShape {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("expected {expected} values, got {found}")]
    DataLength { expected: usize, found: usize },
    #[error("value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("pixel ({x}, {y}) is outside a {width}x{height} image")]
    PixelOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("manipulation magnitude must be positive, got {0}")]
    InvalidTau(f64),
    #[error("{path}: byte {offset}: {message}")]
    Format {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A `width x height x channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::InvalidShape {
                width,
                height,
                channels,
            });
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::DataLength {
                expected,
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::ValueOutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// An image with every value set to `value` (clamped into `[0, 1]`).
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(
            width,
            height,
            channels,
            vec![value.clamp(0.0, 1.0); width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of input dimensions, `width * height * channels`.
    pub fn dims(&self) -> usize {
        self.data.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    /// Flattened values: rows top to bottom, `x` ascending within a row,
    /// channels innermost.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (y * self.width + x) * self.channels + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = self.index(x, y, 0);
        &self.data[start..start + self.channels]
    }

    /// Returns a copy with pixel `(x, y)` set to `values` (one per channel,
    /// clamped into `[0, 1]`).
    pub fn with_pixel(&self, x: usize, y: usize, values: &[f64]) -> Result<Image, ImageError> {
        self.check_pixel(x, y)?;
        let mut out = self.clone();
        let start = out.index(x, y, 0);
        for (slot, v) in out.data[start..start + self.channels].iter_mut().zip(values) {
            *slot = v.clamp(0.0, 1.0);
        }
        Ok(out)
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    fn check_pixel(&self, x: usize, y: usize) -> Result<(), ImageError> {
        if x >= self.width || y >= self.height {
            return Err(ImageError::PixelOutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Bit pattern of the data, usable as a hash key.
    pub fn key(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// The `k` of an `L_k` distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormOrder {
    L0,
    L1,
    L2,
    LInf,
}

impl NormOrder {
    pub const ALL: [NormOrder; 4] = [NormOrder::L0, NormOrder::L1, NormOrder::L2, NormOrder::LInf];
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NormOrder::L0 => "0",
            NormOrder::L1 => "1",
            NormOrder::L2 => "2",
            NormOrder::LInf => "inf",
        };
        f.write_str(s)
    }
}

impl FromStr for NormOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "0" | "l0" => Ok(NormOrder::L0),
            "1" | "l1" => Ok(NormOrder::L1),
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "linf" | "infinity" => Ok(NormOrder::LInf),
            other => Err(format!("unknown norm '{other}', expected one of 0, 1, 2, inf")),
        }
    }
}

/// `||a - b||_k`.
pub fn distance(a: &Image, b: &Image, k: NormOrder) -> Result<f64, ImageError> {
    if a.shape() != b.shape() {
        return Err(ImageError::DimensionMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let diffs = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs());
    let d = match k {
        NormOrder::L0 => diffs.filter(|d| *d > L0_EPSILON).count() as f64,
        NormOrder::L1 => diffs.sum(),
        NormOrder::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        NormOrder::LInf => diffs.fold(0.0, f64::max),
    };
    Ok(d)
}

/// Membership in the closed ball `eta(origin, k, d)`.
pub fn in_neighborhood(candidate: &Image, origin: &Image, k: NormOrder, d: f64) -> Result<bool, ImageError> {
    Ok(distance(candidate, origin, k)? <= d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Instruction {
    Plus,
    Minus,
}

impl Instruction {
    pub const BOTH: [Instruction; 2] = [Instruction::Plus, Instruction::Minus];

    pub fn opposite(self) -> Self {
        match self {
            Instruction::Plus => Instruction::Minus,
            Instruction::Minus => Instruction::Plus,
        }
    }
}

/// How a manipulation moves a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ManipulationMode {
    /// Add or subtract `tau`, clamped to `[0, 1]`.
    Step,
    /// Jump to the upper (`Plus`) or lower (`Minus`) bound.
    Saturate,
}

impl FromStr for ManipulationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "step" => Ok(ManipulationMode::Step),
            "saturate" => Ok(ManipulationMode::Saturate),
            other => Err(format!("unknown mode '{other}', expected step or saturate")),
        }
    }
}

/// A manipulation of every channel of a set of pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ManipulationSpec {
    pub pixels: Vec<(usize, usize)>,
    pub instruction: Instruction,
    pub tau: f64,
    pub mode: ManipulationMode,
}

impl ManipulationSpec {
    pub fn single(x: usize, y: usize, instruction: Instruction, tau: f64, mode: ManipulationMode) -> Self {
        Self {
            pixels: vec![(x, y)],
            instruction,
            tau,
            mode,
        }
    }
}

/// New value of one dimension under a manipulation.
pub fn manipulate_value(value: f64, instruction: Instruction, tau: f64, mode: ManipulationMode) -> f64 {
    match (mode, instruction) {
        (ManipulationMode::Step, Instruction::Plus) => (value + tau).clamp(0.0, 1.0),
        (ManipulationMode::Step, Instruction::Minus) => (value - tau).clamp(0.0, 1.0),
        (ManipulationMode::Saturate, Instruction::Plus) => 1.0,
        (ManipulationMode::Saturate, Instruction::Minus) => 0.0,
    }
}

/// Applies `spec` to a copy of `image`.
pub fn apply_manipulation(image: &Image, spec: &ManipulationSpec) -> Result<Image, ImageError> {
    if !(spec.tau > 0.0) {
        return Err(ImageError::InvalidTau(spec.tau));
    }
    for &(x, y) in &spec.pixels {
        image.check_pixel(x, y)?;
    }
    let mut out = image.clone();
    for &(x, y) in &spec.pixels {
        let start = out.index(x, y, 0);
        for v in &mut out.data[start..start + out.channels] {
            *v = manipulate_value(*v, spec.instruction, spec.tau, spec.mode);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(w: usize, h: usize, c: usize, data: &[f64]) -> Image {
        Image::new(w, h, c, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(2, 1, 1, vec![0.0]).is_err());
        assert!(matches!(
            Image::new(1, 1, 1, vec![1.5]),
            Err(ImageError::ValueOutOfRange { .. })
        ));
        assert!(Image::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = img(1, 1, 3, &[0.5, 0.2, 0.5]);
        let b = img(1, 1, 3, &[0.0, 0.2, 1.0]);
        assert_eq!(distance(&a, &b, NormOrder::L0).unwrap(), 2.0);
        assert!((distance(&a, &b, NormOrder::L1).unwrap() - 1.0).abs() < 1e-12);
        assert!((distance(&a, &b, NormOrder::L2).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(distance(&a, &b, NormOrder::LInf).unwrap(), 0.5);

        let zeros = Image::filled(2, 2, 1, 0.0).unwrap();
        let ones = Image::filled(2, 2, 1, 1.0).unwrap();
        assert_eq!(distance(&zeros, &ones, NormOrder::L0).unwrap(), 4.0);
        assert_eq!(distance(&zeros, &ones, NormOrder::L1).unwrap(), 4.0);
        assert_eq!(distance(&zeros, &ones, NormOrder::L2).unwrap(), 2.0);
        assert_eq!(distance(&zeros, &ones, NormOrder::LInf).unwrap(), 1.0);
        for k in NormOrder::ALL {
            assert_eq!(distance(&a, &a, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn distance_rejects_mismatch() {
        let a = Image::filled(2, 2, 1, 0.0).unwrap();
        let b = Image::filled(2, 2, 3, 0.0).unwrap();
        assert!(matches!(
            distance(&a, &b, NormOrder::L1),
            Err(ImageError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn neighborhood_examples() {
        let a = img(1, 1, 3, &[0.5, 0.2, 0.5]);
        let b = img(1, 1, 3, &[0.0, 0.2, 1.0]);
        assert!(in_neighborhood(&a, &a, NormOrder::L0, 0.0).unwrap());
        assert!(in_neighborhood(&b, &a, NormOrder::L2, 0.71).unwrap());
        let zeros = Image::filled(2, 2, 1, 0.0).unwrap();
        let ones = Image::filled(2, 2, 1, 1.0).unwrap();
        assert!(!in_neighborhood(&ones, &zeros, NormOrder::L0, 3.0).unwrap());
    }

    #[test]
    fn manipulation_examples() {
        let a = img(1, 1, 1, &[0.9]);
        let up = apply_manipulation(
            &a,
            &ManipulationSpec::single(0, 0, Instruction::Plus, 0.3, ManipulationMode::Step),
        )
        .unwrap();
        assert_eq!(up.data(), &[1.0]);

        let down = apply_manipulation(
            &a,
            &ManipulationSpec::single(0, 0, Instruction::Minus, 0.3, ManipulationMode::Saturate),
        )
        .unwrap();
        assert_eq!(down.data(), &[0.0]);

        let rgb = Image::filled(2, 1, 3, 0.5).unwrap();
        let m = apply_manipulation(
            &rgb,
            &ManipulationSpec::single(0, 0, Instruction::Minus, 0.25, ManipulationMode::Step),
        )
        .unwrap();
        assert_eq!(m.pixel(0, 0), &[0.25, 0.25, 0.25]);
        assert_eq!(m.pixel(1, 0), &[0.5, 0.5, 0.5]);
        assert_eq!(distance(&m, &rgb, NormOrder::L0).unwrap(), 3.0);
        assert_eq!(rgb.pixel(0, 0), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn manipulation_rejects_out_of_bounds_and_bad_tau() {
        let a = Image::filled(2, 2, 1, 0.5).unwrap();
        let oob = ManipulationSpec::single(2, 0, Instruction::Plus, 0.1, ManipulationMode::Step);
        assert!(matches!(
            apply_manipulation(&a, &oob),
            Err(ImageError::PixelOutOfBounds { .. })
        ));
        let zero = ManipulationSpec::single(0, 0, Instruction::Plus, 0.0, ManipulationMode::Step);
        assert!(matches!(apply_manipulation(&a, &zero), Err(ImageError::InvalidTau(_))));
    }

    #[test]
    fn norm_parsing() {
        assert_eq!("inf".parse::<NormOrder>().unwrap(), NormOrder::LInf);
        assert_eq!("0".parse::<NormOrder>().unwrap(), NormOrder::L0);
        assert!("3".parse::<NormOrder>().is_err());
    }

    fn arb_image(w: usize, h: usize, c: usize) -> impl Strategy<Value = Image> {
        prop::collection::vec(0.0f64..=1.0, w * h * c).prop_map(move |d| Image::new(w, h, c, d).unwrap())
    }

    fn arb_spec(w: usize, h: usize) -> impl Strategy<Value = ManipulationSpec> {
        (
            prop::collection::vec((0..w, 0..h), 1..4),
            prop::bool::ANY,
            0.01f64..0.6,
            prop::bool::ANY,
        )
            .prop_map(|(pixels, plus, tau, step)| ManipulationSpec {
                pixels,
                instruction: if plus { Instruction::Plus } else { Instruction::Minus },
                tau,
                mode: if step { ManipulationMode::Step } else { ManipulationMode::Saturate },
            })
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_zero_on_diagonal(a in arb_image(3, 2, 3), b in arb_image(3, 2, 3)) {
            for k in NormOrder::ALL {
                prop_assert_eq!(distance(&a, &b, k).unwrap(), distance(&b, &a, k).unwrap());
                prop_assert_eq!(distance(&a, &a, k).unwrap(), 0.0);
            }
        }

        #[test]
        fn triangle_inequality(a in arb_image(3, 3, 1), b in arb_image(3, 3, 1), c in arb_image(3, 3, 1)) {
            for k in [NormOrder::L1, NormOrder::L2, NormOrder::LInf] {
                let ac = distance(&a, &c, k).unwrap();
                let ab = distance(&a, &b, k).unwrap();
                let bc = distance(&b, &c, k).unwrap();
                prop_assert!(ac <= ab + bc + 1e-9);
            }
        }

        #[test]
        fn manipulation_stays_in_range(a in arb_image(3, 3, 3), spec in arb_spec(3, 3)) {
            let m = apply_manipulation(&a, &spec).unwrap();
            prop_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn saturate_is_idempotent(a in arb_image(3, 3, 1), spec in arb_spec(3, 3)) {
            let spec = ManipulationSpec { mode: ManipulationMode::Saturate, ..spec };
            let once = apply_manipulation(&a, &spec).unwrap();
            let twice = apply_manipulation(&once, &spec).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn opposite_steps_restore_without_clamping(
            data in prop::collection::vec(0.3f64..=0.7, 9),
            spec in arb_spec(3, 3),
        ) {
            let a = Image::new(3, 3, 1, data).unwrap();
            let mut spec = ManipulationSpec { mode: ManipulationMode::Step, ..spec };
            spec.tau = spec.tau.min(0.29);
            spec.pixels.sort();
            spec.pixels.dedup();
            let there = apply_manipulation(&a, &spec).unwrap();
            let back = apply_manipulation(
                &there,
                &ManipulationSpec { instruction: spec.instruction.opposite(), ..spec.clone() },
            )
            .unwrap();
            for (x, y) in a.data().iter().zip(back.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
