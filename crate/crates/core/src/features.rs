//! Scale-space keypoint detection.
//!
//! A reduced SIFT front end: Gaussian stacks per octave, difference-of-Gaussian
//! layers, and strict 26-neighbour extrema. Each keypoint carries only its
//! position, size and response strength; descriptors and orientation are not
//! computed.

use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("blur sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("invalid scale-space configuration: {0}")]
    InvalidConfig(String),
}

/// A detected feature: position in base-image pixels, size and response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub response: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, size: f64, response: f64) -> Self {
        Self { x, y, size, response }
    }

    /// Checks the keypoint lies in a `width x height` image and has positive
    /// size and response.
    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x < width as f64
            && self.y < height as f64
            && self.size > 0.0
            && self.response > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpaceConfig {
    pub octaves: usize,
    /// Number of difference-of-Gaussian layers per octave. Extrema are searched
    /// in the interior layers only, so at least 3 are needed.
    pub scales_per_octave: usize,
    pub base_sigma: f64,
    /// Ratio between consecutive blur levels.
    pub k_factor: f64,
    pub contrast_threshold: f64,
}

impl Default for ScaleSpaceConfig {
    fn default() -> Self {
        Self {
            octaves: 3,
            scales_per_octave: 4,
            base_sigma: 1.6,
            k_factor: 2f64.powf(1.0 / 3.0),
            contrast_threshold: 0.01,
        }
    }
}

impl ScaleSpaceConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::InvalidConfig(m.to_string()));
        if self.octaves < 1 {
            return bad("octaves must be at least 1");
        }
        if self.scales_per_octave < 3 {
            return bad("scales_per_octave must be at least 3");
        }
        if !(self.base_sigma > 0.0) {
            return bad("base_sigma must be positive");
        }
        if !(self.k_factor > 1.0) {
            return bad("k_factor must exceed 1");
        }
        if !(self.contrast_threshold >= 0.0) {
            return bad("contrast_threshold must be non-negative");
        }
        Ok(())
    }
}

/// Real-valued single-channel raster used inside the scale space. Unlike
/// [`Image`] its values are unbounded (DoG layers are signed).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with half-sample symmetric extension (`c b a | a b c`), so the
    /// first sample past an edge repeats the edge pixel.
    fn reflected(&self, x: isize, y: isize) -> f64 {
        self.at(reflect(x, self.width), reflect(y, self.height))
    }

    fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Rec.601 luminance of a colour image; grayscale images are copied.
pub fn luminance(image: &Image) -> Plane {
    let data = if image.channels() == 1 {
        image.data().to_vec()
    } else {
        image
            .data()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    };
    Plane {
        width: image.width(),
        height: image.height(),
        data,
    }
}

/// Normalised 1-D Gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable Gaussian blur with symmetric border extension.
pub fn blur_plane(plane: &Plane, sigma: f64) -> Plane {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (plane.width, plane.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane.reflected(x as isize + i as isize - r, y as isize))
                .sum();
        }
    }
    let tmp = Plane { width: w, height: h, data: tmp };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp.reflected(x as isize, y as isize + i as isize - r))
                .sum();
        }
    }
    Plane { width: w, height: h, data: out }
}

/// Gaussian blur of an image. Colour images are reduced to luminance first, so
/// the result always has one channel.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image, FeatureError> {
    if !(sigma > 0.0) {
        return Err(FeatureError::InvalidSigma(sigma));
    }
    let blurred = blur_plane(&luminance(image), sigma);
    let data = blurred.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Image::from_raw_unchecked(image.width(), image.height(), 1, data))
}

/// 2x2 box average, dropping a trailing odd row or column.
fn downsample(plane: &Plane) -> Plane {
    let (w, h) = (plane.width / 2, plane.height / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = plane.at(2 * x, 2 * y)
                + plane.at(2 * x + 1, 2 * y)
                + plane.at(2 * x, 2 * y + 1)
                + plane.at(2 * x + 1, 2 * y + 1);
            data.push(s / 4.0);
        }
    }
    Plane { width: w, height: h, data }
}

/// The keypoints used when detection finds nothing: a 4x4 grid of equal
/// response covering the image.
pub fn fallback_grid(width: usize, height: usize) -> Vec<Keypoint> {
    let size = width.min(height) as f64 / 8.0;
    let mut out = Vec::with_capacity(16);
    for j in 0..4 {
        for i in 0..4 {
            out.push(Keypoint::new(
                (i as f64 + 0.5) * width as f64 / 4.0,
                (j as f64 + 0.5) * height as f64 / 4.0,
                size,
                1.0,
            ));
        }
    }
    out
}

fn is_strict_extremum(layers: &[Plane], j: usize, x: usize, y: usize) -> bool {
    let v = layers[j].at(x, y);
    let mut greater = true;
    let mut less = true;
    for layer in &layers[j - 1..=j + 1] {
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if std::ptr::eq(layer, &layers[j]) && nx == x && ny == y {
                    continue;
                }
                let n = layer.at(nx, ny);
                greater &= v > n;
                less &= v < n;
                if !greater && !less {
                    return false;
                }
            }
        }
    }
    greater || less
}

/// Detects scale-space extrema.
///
/// The result is sorted by descending response, ties by `(y, x)`. When the
/// image is smaller than 8x8 or no extremum passes the contrast threshold,
/// the [`fallback_grid`] is returned, so the list is never empty.
pub fn detect_keypoints(image: &Image, config: &ScaleSpaceConfig) -> Result<Vec<Keypoint>, FeatureError> {
    config.validate()?;
    let (width, height) = (image.width(), image.height());
    if width < 8 || height < 8 {
        return Ok(fallback_grid(width, height));
    }

    let mut found = Vec::new();
    let mut base = luminance(image);
    for octave in 0..config.octaves {
        if base.width < 4 || base.height < 4 {
            break;
        }
        let scale = (1u64 << octave) as f64;
        let gaussians: Vec<Plane> = (0..=config.scales_per_octave)
            .map(|j| blur_plane(&base, config.base_sigma * config.k_factor.powi(j as i32)))
            .collect();
        let dogs: Vec<Plane> = gaussians
            .windows(2)
            .map(|pair| pair[1].zip_map(&pair[0], |a, b| a - b))
            .collect();

        for j in 1..dogs.len() - 1 {
            let sigma = config.base_sigma * config.k_factor.powi(j as i32);
            for y in 1..base.height - 1 {
                for x in 1..base.width - 1 {
                    let v = dogs[j].at(x, y).abs();
                    if v == 0.0 || v < config.contrast_threshold {
                        continue;
                    }
                    if is_strict_extremum(&dogs, j, x, y) {
                        found.push(Keypoint::new(
                            x as f64 * scale,
                            y as f64 * scale,
                            1.6 * sigma * scale,
                            v,
                        ));
                    }
                }
            }
        }
        base = downsample(&base);
    }

    if found.is_empty() {
        return Ok(fallback_grid(width, height));
    }
    found.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> Image {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                data.push((-r2 / (2.0 * sigma * sigma)).exp());
            }
        }
        Image::new(w, h, 1, data).unwrap()
    }

    fn upsample2(img: &Image) -> Image {
        let (w, h) = (img.width() * 2, img.height() * 2);
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| img.get(x / 2, y / 2, 0))
            .collect();
        Image::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(9, 7, 1, 0.37).unwrap();
        let out = gaussian_blur(&img, 1.3).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn blur_of_impulse_is_central_kernel_weight() {
        let mut data = vec![0.0; 81];
        data[4 * 9 + 4] = 1.0;
        let img = Image::new(9, 9, 1, data).unwrap();
        let out = gaussian_blur(&img, 1.0).unwrap();

        // Independent route: the 2-D kernel of radius 3 evaluated directly and
        // normalised by summation.
        let mut total = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                total += (-((dx * dx + dy * dy) as f64) / 2.0).exp() / (2.0 * std::f64::consts::PI);
            }
        }
        let center = 1.0 / (2.0 * std::f64::consts::PI) / total;
        assert!((out.get(4, 4, 0) - center).abs() < 1e-12, "{} vs {center}", out.get(4, 4, 0));
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let img = Image::filled(4, 4, 1, 0.5).unwrap();
        assert_eq!(gaussian_blur(&img, 0.0), Err(FeatureError::InvalidSigma(0.0)));
    }

    #[test]
    fn blur_semigroup() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data = (0..256).map(|_| rng.gen::<f64>()).collect();
        let img = Image::new(16, 16, 1, data).unwrap();
        let twice = gaussian_blur(&gaussian_blur(&img, 1.0).unwrap(), 1.0).unwrap();
        let once = gaussian_blur(&img, 2f64.sqrt()).unwrap();
        let linf = twice
            .data()
            .iter()
            .zip(once.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf <= 0.02, "L_inf {linf}");
    }

    #[test]
    fn colour_blur_uses_luminance() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let out = gaussian_blur(&img, 0.5).unwrap();
        assert_eq!(out.channels(), 1);
        assert!((out.data()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn constant_image_falls_back_to_grid() {
        let img = Image::filled(32, 32, 1, 0.4).unwrap();
        let kps = detect_keypoints(&img, &ScaleSpaceConfig::default()).unwrap();
        assert_eq!(kps, fallback_grid(32, 32));
        assert_eq!(kps.len(), 16);
        assert!(kps.iter().all(|k| k.response == 1.0 && k.size == 4.0));
    }

    #[test]
    fn tiny_images_use_fallback() {
        let img = Image::filled(3, 3, 1, 0.4).unwrap();
        let kps = detect_keypoints(&img, &ScaleSpaceConfig::default()).unwrap();
        assert_eq!(kps.len(), 16);
        assert!(kps.iter().all(|k| k.is_valid_for(3, 3)));
    }

    #[test]
    fn blob_is_dominant_keypoint() {
        let img = blob(32, 32, 16.0, 16.0, 3.0);
        let kps = detect_keypoints(&img, &ScaleSpaceConfig::default()).unwrap();
        let top = kps[0];
        assert!((top.x - 16.0).hypot(top.y - 16.0) <= 1.5, "{top:?}");
        assert!(kps.iter().all(|k| k.is_valid_for(32, 32)));
        assert!(kps.windows(2).all(|w| w[0].response >= w[1].response));
    }

    #[test]
    fn blob_maximum_matches_direct_convolution() {
        // Brute-force DoG over all positions using direct 2-D convolution.
        let img = blob(32, 32, 16.0, 16.0, 3.0);
        let cfg = ScaleSpaceConfig::default();
        let conv = |sigma: f64| -> Vec<f64> {
            let r = (3.0 * sigma).ceil() as i64;
            let mut ker = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    ker.push((dx, dy, (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()));
                }
            }
            let norm: f64 = ker.iter().map(|k| k.2).sum();
            let mut out = vec![0.0; 32 * 32];
            for y in 0..32i64 {
                for x in 0..32i64 {
                    let mut s = 0.0;
                    for &(dx, dy, w) in &ker {
                        let fold = |v: i64| if v < 0 { -v - 1 } else if v > 31 { 63 - v } else { v };
                        let (sx, sy) = (fold(x + dx), fold(y + dy));
                        s += w * img.get(sx as usize, sy as usize, 0);
                    }
                    out[(y * 32 + x) as usize] = s / norm;
                }
            }
            out
        };
        let gs: Vec<Vec<f64>> = (0..=cfg.scales_per_octave)
            .map(|j| conv(cfg.base_sigma * cfg.k_factor.powi(j as i32)))
            .collect();
        let mut best = (0.0, 0usize);
        for j in 1..cfg.scales_per_octave - 1 {
            for i in 0..32 * 32 {
                let v = (gs[j + 1][i] - gs[j][i]).abs();
                if v > best.0 {
                    best = (v, i);
                }
            }
        }
        let (bx, by) = ((best.1 % 32) as f64, (best.1 / 32) as f64);
        assert_eq!((bx, by), (16.0, 16.0));
        let kps = detect_keypoints(&img, &cfg).unwrap();
        assert_eq!((kps[0].x, kps[0].y), (bx, by));
        assert!((kps[0].response - best.0).abs() < 1e-9);
    }

    #[test]
    fn translation_covariance() {
        let a = detect_keypoints(&blob(32, 32, 16.0, 16.0, 3.0), &ScaleSpaceConfig::default()).unwrap()[0];
        let b = detect_keypoints(&blob(32, 32, 20.0, 20.0, 3.0), &ScaleSpaceConfig::default()).unwrap()[0];
        assert!(((b.x - a.x) - 4.0).abs() <= 1.0 && ((b.y - a.y) - 4.0).abs() <= 1.0);
    }

    #[test]
    fn scale_covariance() {
        let img = blob(32, 32, 16.0, 16.0, 3.0);
        let a = detect_keypoints(&img, &ScaleSpaceConfig::default()).unwrap()[0];
        let b = detect_keypoints(&upsample2(&img), &ScaleSpaceConfig::default()).unwrap()[0];
        assert!((b.x - 32.0).hypot(b.y - 32.0) <= 3.0, "{b:?}");
        let ratio = b.size / a.size;
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn detection_is_deterministic() {
        let img = blob(24, 20, 9.0, 11.0, 2.5);
        let cfg = ScaleSpaceConfig::default();
        assert_eq!(detect_keypoints(&img, &cfg).unwrap(), detect_keypoints(&img, &cfg).unwrap());
    }

    #[test]
    fn invalid_config_rejected() {
        let img = Image::filled(8, 8, 1, 0.0).unwrap();
        let cfg = ScaleSpaceConfig {
            scales_per_octave: 2,
            ..Default::default()
        };
        assert!(detect_keypoints(&img, &cfg).is_err());
    }
}
