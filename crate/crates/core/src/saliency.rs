//! Saliency distribution over pixels: a Gaussian mixture with one component
//! per keypoint, weighted by response strength and discretised on the pixel
//! grid.

use rand::Rng;
use thiserror::Error;

use crate::features::Keypoint;
use crate::image::Image;

#[derive(Debug, Error, PartialEq)]
pub enum SaliencyError {
    #[error("saliency model needs at least one keypoint")]
    NoKeypoints,
    #[error("keypoint {index} ({x}, {y}) lies outside the {width}x{height} grid")]
    KeypointOutOfGrid {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("keypoint {index} has non-positive size or response")]
    InvalidKeypoint { index: usize },
    #[error("pixel ({x}, {y}) is outside the {width}x{height} grid")]
    PixelOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("component {0} does not exist")]
    NoSuchComponent(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub mean_x: f64,
    pub mean_y: f64,
    pub sigma: f64,
}

impl Component {
    fn log_density(&self, x: f64, y: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        let d2 = (x - self.mean_x).powi(2) + (y - self.mean_y).powi(2);
        -(2.0 * std::f64::consts::PI * s2).ln() - d2 / (2.0 * s2)
    }
}

/// A pixel with its probability under some distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPixel {
    pub x: usize,
    pub y: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyModel {
    components: Vec<Component>,
    weights: Vec<f64>,
    width: usize,
    height: usize,
    mass: Vec<f64>,
    cdf: Vec<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Builds the mixture `sum_i phi_i G_i` with `phi_i = r_i / sum_j r_j` and
/// component `i` an isotropic Gaussian of standard deviation `size_i`,
/// evaluated at pixel centres and normalised over the grid.
pub fn build_saliency(keypoints: &[Keypoint], width: usize, height: usize) -> Result<SaliencyModel, SaliencyError> {
    if keypoints.is_empty() {
        return Err(SaliencyError::NoKeypoints);
    }
    for (index, kp) in keypoints.iter().enumerate() {
        if !(kp.size > 0.0 && kp.response > 0.0) {
            return Err(SaliencyError::InvalidKeypoint { index });
        }
        if !(kp.x >= 0.0 && kp.y >= 0.0 && kp.x < width as f64 && kp.y < height as f64) {
            return Err(SaliencyError::KeypointOutOfGrid {
                index,
                x: kp.x,
                y: kp.y,
                width,
                height,
            });
        }
    }
    let total: f64 = keypoints.iter().map(|k| k.response).sum();
    let weights: Vec<f64> = keypoints.iter().map(|k| k.response / total).collect();
    let components: Vec<Component> = keypoints
        .iter()
        .map(|k| Component {
            mean_x: k.x,
            mean_y: k.y,
            sigma: k.size,
        })
        .collect();

    // Log space keeps narrow components from underflowing to an all-zero grid.
    let log_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut log_mass = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let terms = components
                .iter()
                .zip(&log_weights)
                .map(|(c, lw)| lw + c.log_density(x as f64, y as f64));
            log_mass.push(log_sum_exp(terms));
        }
    }
    let max = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mass: Vec<f64> = log_mass.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= sum);

    let mut acc = 0.0;
    let cdf = mass
        .iter()
        .map(|m| {
            acc += m;
            acc
        })
        .collect();
    Ok(SaliencyModel {
        components,
        weights,
        width,
        height,
        mass,
        cdf,
    })
}

impl SaliencyModel {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Mixture weights `phi_i`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Row-major table of pixel probabilities.
    pub fn mass_table(&self) -> &[f64] {
        &self.mass
    }

    pub fn pixel_mass(&self, x: usize, y: usize) -> Result<f64, SaliencyError> {
        if x >= self.width || y >= self.height {
            return Err(SaliencyError::PixelOutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.mass[y * self.width + x])
    }

    /// Draws a pixel by inverting the cumulative mass table.
    pub fn sample_pixel<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.gen();
        let total = *self.cdf.last().expect("grid is non-empty");
        let mut i = self.cdf.partition_point(|&c| c <= u * total);
        if i >= self.cdf.len() {
            i = self.mass.iter().rposition(|&m| m > 0.0).unwrap_or(self.cdf.len() - 1);
        }
        (i % self.width, i / self.width)
    }

    /// Pixels within `radius_sigmas * sigma_i` of component `i`'s mean, in
    /// `(y, x)` order, with probabilities proportional to the component's
    /// density and summing to one. When no pixel centre falls inside the disc
    /// the nearest pixel is returned alone.
    pub fn component_disc(&self, i: usize, radius_sigmas: f64) -> Result<Vec<WeightedPixel>, SaliencyError> {
        let c = *self.components.get(i).ok_or(SaliencyError::NoSuchComponent(i))?;
        Ok(disc_pixels(c.mean_x, c.mean_y, c.sigma, radius_sigmas, self.width, self.height))
    }

    /// The mass table rescaled so its maximum is 1, as a grayscale image.
    pub fn heatmap(&self) -> Image {
        let max = self.mass.iter().copied().fold(0.0, f64::max);
        let data = self.mass.iter().map(|m| m / max).collect();
        Image::from_raw_unchecked(self.width, self.height, 1, data)
    }
}

/// Pixels of a `width x height` grid whose centres lie within
/// `radius_sigmas * sigma` of `(cx, cy)`, weighted by an isotropic Gaussian of
/// standard deviation `sigma`. See [`SaliencyModel::component_disc`].
pub fn disc_pixels(cx: f64, cy: f64, sigma: f64, radius_sigmas: f64, width: usize, height: usize) -> Vec<WeightedPixel> {
    let radius = radius_sigmas * sigma;
    let mut inside = Vec::new();
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let y1 = ((cy + radius).ceil().max(0.0) as usize).min(height - 1);
    let x1 = ((cx + radius).ceil().max(0.0) as usize).min(width - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            if d2.sqrt() <= radius {
                inside.push((x, y, d2));
            }
        }
    }
    if inside.is_empty() {
        let x = (cx.round().max(0.0) as usize).min(width - 1);
        let y = (cy.round().max(0.0) as usize).min(height - 1);
        return vec![WeightedPixel { x, y, prob: 1.0 }];
    }
    let min_d2 = inside.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let s2 = 2.0 * sigma * sigma;
    let raw: Vec<f64> = inside.iter().map(|p| (-(p.2 - min_d2) / s2).exp()).collect();
    let sum: f64 = raw.iter().sum();
    inside
        .iter()
        .zip(raw)
        .map(|(&(x, y, _), w)| WeightedPixel { x, y, prob: w / sum })
        .collect()
}

/// Draws an index from a discrete distribution given by `probs`.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: impl IntoIterator<Item = f64>, rng: &mut R) -> usize {
    let probs: Vec<f64> = probs.into_iter().collect();
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
