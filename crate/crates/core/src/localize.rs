//! Microbubble localization: adaptive noise thresholds, binarization,
//! 8-connected components with intensity-weighted centroids, and the
//! normalised cross-correlation baseline.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Dims3, Kernel2, Tensor3};

/// Per-pixel threshold map for one frame geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl NoiseImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "noise image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(NoiseImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.data[x + self.width * z]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Shifts the map circularly by whole pixels.
    pub fn shifted(&self, dx: isize, dz: isize) -> Self {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut data = vec![0.0; self.data.len()];
        for z in 0..h {
            for x in 0..w {
                let tx = (x + dx).rem_euclid(w) as usize;
                let tz = (z + dz).rem_euclid(h) as usize;
                data[tx + self.width * tz] = self.data[(x + w * z) as usize];
            }
        }
        NoiseImage { data, ..*self }
    }
}

/// One detected bubble. Coordinates are sub-pixel, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub frame: usize,
    pub x: f64,
    pub z: f64,
    pub intensity: f64,
}

/// Detections of a whole stack plus the acquisition geometry needed to
/// convert them to physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationSet {
    pub pixel_size_um: f64,
    pub frame_rate_hz: f64,
    pub frames: usize,
    pub locs: Vec<Localization>,
}

impl LocalizationSet {
    pub fn empty(frames: usize, pixel_size_um: f64, frame_rate_hz: f64) -> Self {
        LocalizationSet {
            pixel_size_um,
            frame_rate_hz,
            frames,
            locs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.locs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locs.is_empty()
    }

    /// Detections of frame `t`, in stored order.
    pub fn in_frame(&self, t: usize) -> impl Iterator<Item = &Localization> {
        self.locs.iter().filter(move |l| l.frame == t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size_um > 0.0) {
            return Err(Error::arg(format!(
                "pixel size must be positive, got {}",
                self.pixel_size_um
            )));
        }
        if let Some(l) = self.locs.iter().find(|l| l.frame >= self.frames) {
            return Err(Error::arg(format!(
                "localization in frame {} of a {}-frame set",
                l.frame, self.frames
            )));
        }
        Ok(())
    }
}

/// Binary detection mask with the stack layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask3 {
    dims: Dims3,
    data: Vec<bool>,
}

impl Mask3 {
    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn get(&self, x: usize, z: usize, t: usize) -> bool {
        self.data[self.dims.index(x, z, t)]
    }

    pub fn frame(&self, t: usize) -> &[bool] {
        let p = self.dims.frame_len();
        &self.data[t * p..(t + 1) * p]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Localization parameters. `None` fields take geometry-dependent defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizeParams {
    pub window: Option<usize>,
    pub sensitivity: f64,
    pub kappa: f64,
    pub crop: Option<usize>,
    pub pixel_size_um: f64,
    pub frame_rate_hz: f64,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        LocalizeParams {
            window: None,
            sensitivity: 0.5,
            kappa: 0.3,
            crop: None,
            pixel_size_um: 50.0,
            frame_rate_hz: 50.0,
        }
    }
}

impl LocalizeParams {
    /// `2 * floor(min(W, H) / 16) + 1`, at least 3.
    pub fn default_window(width: usize, height: usize) -> usize {
        (2 * (width.min(height) / 16) + 1).max(3)
    }

    /// Half the PSF extent, rounded up.
    pub fn default_crop(psf_width: usize, psf_height: usize) -> usize {
        psf_width.max(psf_height).div_ceil(2)
    }

    pub fn window_for(&self, d: Dims3) -> usize {
        self.window.unwrap_or_else(|| Self::default_window(d.width, d.height))
    }

    pub fn crop_for(&self, psf: (usize, usize)) -> usize {
        self.crop.unwrap_or_else(|| Self::default_crop(psf.0, psf.1))
    }
}

fn check_window(window: usize, sensitivity: f64) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::arg(format!("window must be odd and >= 3, got {window}")));
    }
    if !(0.0..=1.0).contains(&sensitivity) {
        return Err(Error::arg(format!("sensitivity must lie in [0, 1], got {sensitivity}")));
    }
    Ok(())
}

/// Bradley-Roth threshold surface of one frame: the local mean over a
/// `window x window` neighbourhood (replicated borders) scaled by
/// `1 - sensitivity / 2`.
pub fn adaptive_noise_image<T: Real>(
    frame: &[T],
    width: usize,
    height: usize,
    window: usize,
    sensitivity: f64,
) -> Result<NoiseImage> {
    check_window(window, sensitivity)?;
    if frame.len() != width * height || frame.is_empty() {
        return Err(Error::shape(format!(
            "frame of {} values is not {width}x{height}",
            frame.len()
        )));
    }
    let r = window / 2;
    let (pw, ph) = (width + 2 * r, height + 2 * r);
    // Integral image of the replicate-padded frame, one extra zero row and column.
    let mut integral = vec![0.0f64; (pw + 1) * (ph + 1)];
    for pz in 0..ph {
        let z = pz.saturating_sub(r).min(height - 1);
        let mut row = 0.0;
        for px in 0..pw {
            let x = px.saturating_sub(r).min(width - 1);
            row += frame[x + width * z].as_f64();
            integral[(px + 1) + (pw + 1) * (pz + 1)] = integral[(px + 1) + (pw + 1) * pz] + row;
        }
    }
    let area = (window * window) as f64;
    let scale = 1.0 - 0.5 * sensitivity;
    let at = |x: usize, z: usize| integral[x + (pw + 1) * z];
    let mut data = Vec::with_capacity(width * height);
    for z in 0..height {
        for x in 0..width {
            // Padded window for pixel (x, z) spans [x, x + window) x [z, z + window).
            let sum = at(x + window, z + window) - at(x, z + window) - at(x + window, z) + at(x, z);
            data.push(scale * sum / area);
        }
    }
    NoiseImage::new(width, height, data)
}

/// Mean over frames of the per-frame threshold surfaces.
pub fn averaged_noise_image<T: Real>(stack: &Tensor3<T>, window: usize, sensitivity: f64) -> Result<NoiseImage> {
    check_window(window, sensitivity)?;
    let d = stack.dims();
    let images = (0..d.frames)
        .into_par_iter()
        .map(|t| adaptive_noise_image(stack.frame(t), d.width, d.height, window, sensitivity))
        .collect::<Result<Vec<_>>>()?;
    let mut data = vec![0.0; d.frame_len()];
    for img in &images {
        for (a, b) in data.iter_mut().zip(&img.data) {
            *a += b;
        }
    }
    let k = d.frames as f64;
    data.iter_mut().for_each(|v| *v /= k);
    NoiseImage::new(d.width, d.height, data)
}

fn in_crop(d: Dims3, crop: usize, x: usize, z: usize) -> bool {
    x < crop || z < crop || x + crop >= d.width || z + crop >= d.height
}

/// `x > kappa * noise`, with a `crop`-pixel border forced to zero.
pub fn binarize<T: Real>(x: &Tensor3<T>, noise: &NoiseImage, kappa: f64, crop: usize) -> Result<Mask3> {
    let d = x.dims();
    if noise.width != d.width || noise.height != d.height {
        return Err(Error::shape(format!(
            "noise image {}x{} does not match stack {d}",
            noise.width, noise.height
        )));
    }
    if !(kappa > 0.0) {
        return Err(Error::arg(format!("kappa must be positive, got {kappa}")));
    }
    let mut data = vec![false; d.len()];
    for t in 0..d.frames {
        for z in 0..d.height {
            for xx in 0..d.width {
                let i = d.index(xx, z, t);
                data[i] = !in_crop(d, crop, xx, z) && x.as_slice()[i].as_f64() > kappa * noise.get(xx, z);
            }
        }
    }
    Ok(Mask3 { dims: d, data })
}

/// 8-connected components of `mask`, each reduced to its
/// intensity-weighted centroid. Components are reported in raster order of
/// their first pixel; components with non-positive total intensity are
/// dropped.
pub fn weighted_centroids<T: Real>(
    mask: &[bool],
    intensity: &[T],
    width: usize,
    height: usize,
    frame: usize,
) -> Result<Vec<Localization>> {
    if mask.len() != width * height || intensity.len() != mask.len() {
        return Err(Error::shape("mask and intensity frames must both be width x height"));
    }
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut sx, mut sz, mut si) = (0.0, 0.0, 0.0);
        while let Some(i) = stack.pop() {
            let (x, z) = (i % width, i / width);
            let v = intensity[i].as_f64();
            sx += x as f64 * v;
            sz += z as f64 * v;
            si += v;
            for nz in z.saturating_sub(1)..=(z + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    let j = nx + width * nz;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if si > 0.0 {
            out.push(Localization {
                frame,
                x: sx / si,
                z: sz / si,
                intensity: si,
            });
        }
    }
    Ok(out)
}

fn centroids_per_frame<T: Real>(mask: &Mask3, intensity: &Tensor3<T>) -> Result<Vec<Localization>> {
    let d = mask.dims;
    let per_frame = (0..d.frames)
        .into_par_iter()
        .map(|t| weighted_centroids(mask.frame(t), intensity.frame(t), d.width, d.height, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Noise image of the raw stack. Raw samples enter as magnitudes so the
/// threshold tracks the noise level rather than its zero mean.
pub fn raw_noise_image<T: Real>(y_raw: &Tensor3<T>, params: &LocalizeParams) -> Result<NoiseImage> {
    let magnitude = y_raw.map(|v| v.abs());
    averaged_noise_image(&magnitude, params.window_for(y_raw.dims()), params.sensitivity)
}

/// Detections in a deconvolved stack `x`, thresholded against the noise
/// image of the raw stack.
pub fn localize<T: Real>(
    x: &Tensor3<T>,
    y_raw: &Tensor3<T>,
    psf: (usize, usize),
    params: &LocalizeParams,
) -> Result<LocalizationSet> {
    x.require_same_dims(y_raw)?;
    let noise = raw_noise_image(y_raw, params)?;
    localize_with_noise(x, &noise, psf, params)
}

/// [`localize`] with a precomputed noise image, for threshold sweeps.
pub fn localize_with_noise<T: Real>(
    x: &Tensor3<T>,
    noise: &NoiseImage,
    psf: (usize, usize),
    params: &LocalizeParams,
) -> Result<LocalizationSet> {
    let mask = binarize(x, noise, params.kappa, params.crop_for(psf))?;
    let locs = centroids_per_frame(&mask, x)?;
    let set = LocalizationSet {
        pixel_size_um: params.pixel_size_um,
        frame_rate_hz: params.frame_rate_hz,
        frames: x.frames(),
        locs,
    };
    set.validate()?;
    Ok(set)
}

/// Zero-normalised cross-correlation of every frame with `a`, evaluated
/// where the whole kernel fits inside the frame and zero elsewhere.
/// Windows with zero variance also score zero.
pub fn ncc_map<T: Real>(y: &Tensor3<T>, a: &Kernel2<T>) -> Result<Tensor3<f64>> {
    let d = y.dims();
    a.fits(d)?;
    let (kw, kh) = (a.width(), a.height());
    let n = (kw * kh) as f64;
    let mean_a = a.sum() / n;
    let ka: Vec<f64> = a.as_slice().iter().map(|v| v.as_f64() - mean_a).collect();
    let norm_a = ka.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = Tensor3::zeros(d);
    if norm_a == 0.0 {
        return Ok(out);
    }
    let (rx, rz) = (kw / 2, kh / 2);
    out.as_mut_slice()
        .par_chunks_mut(d.frame_len())
        .enumerate()
        .for_each(|(t, dst)| {
            let f = y.frame(t);
            let mut win = vec![0.0; kw * kh];
            for z in rz..d.height - rz {
                for x in rx..d.width - rx {
                    for j in 0..kh {
                        let row = &f[(z + j - rz) * d.width + x - rx..][..kw];
                        for (w, v) in win[j * kw..(j + 1) * kw].iter_mut().zip(row) {
                            *w = v.as_f64();
                        }
                    }
                    let mean = win.iter().sum::<f64>() / n;
                    let (mut num, mut var) = (0.0, 0.0);
                    for (w, k) in win.iter().zip(&ka) {
                        let c = w - mean;
                        num += c * k;
                        var += c * c;
                    }
                    if var > 0.0 {
                        dst[x + d.width * z] = num / (var.sqrt() * norm_a);
                    }
                }
            }
        });
    Ok(out)
}

/// Baseline detector: threshold the NCC map and take centroids weighted by
/// the raw intensities (negative samples count as zero).
pub fn ncc_localize<T: Real>(
    y: &Tensor3<T>,
    a: &Kernel2<T>,
    threshold: f64,
    params: &LocalizeParams,
) -> Result<LocalizationSet> {
    let ncc = ncc_map(y, a)?;
    ncc_localize_with_map(y, &ncc, (a.width(), a.height()), threshold, params)
}

/// [`ncc_localize`] with a precomputed NCC map, for threshold sweeps.
pub fn ncc_localize_with_map<T: Real>(
    y: &Tensor3<T>,
    ncc: &Tensor3<f64>,
    psf: (usize, usize),
    threshold: f64,
    params: &LocalizeParams,
) -> Result<LocalizationSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg(format!("NCC threshold must lie in (0, 1), got {threshold}")));
    }
    let d = y.dims();
    if ncc.dims() != d {
        return Err(Error::shape("NCC map does not match the stack"));
    }
    let crop = params.crop_for(psf);
    let mut data = vec![false; d.len()];
    for t in 0..d.frames {
        for z in 0..d.height {
            for x in 0..d.width {
                let i = d.index(x, z, t);
                data[i] = !in_crop(d, crop, x, z) && ncc.as_slice()[i] > threshold;
            }
        }
    }
    let mask = Mask3 { dims: d, data };
    let weights = y.map(|v| v.max(T::zero()));
    let set = LocalizationSet {
        pixel_size_um: params.pixel_size_um,
        frame_rate_hz: params.frame_rate_hz,
        frames: d.frames,
        locs: centroids_per_frame(&mask, &weights)?,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_frame_gives_constant_threshold() {
        let f = vec![2.5f64; 8 * 6];
        let n = adaptive_noise_image(&f, 8, 6, 3, 0.0).unwrap();
        assert!(n.as_slice().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let n = adaptive_noise_image(&f, 8, 6, 5, 1.0).unwrap();
        assert!(n.as_slice().iter().all(|&v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn bad_window_is_rejected() {
        let f = vec![0.0f64; 16];
        assert!(adaptive_noise_image(&f, 4, 4, 4, 0.5).is_err());
        assert!(adaptive_noise_image(&f, 4, 4, 1, 0.5).is_err());
        assert!(adaptive_noise_image(&f, 4, 4, 3, 1.5).is_err());
    }

    #[test]
    fn two_pixel_component_centroid() {
        let (w, h) = (6, 6);
        let mut mask = vec![false; w * h];
        let mut inten = vec![0.0f64; w * h];
        mask[3 + w * 4] = true;
        inten[3 + w * 4] = 1.0;
        mask[4 + w * 4] = true;
        inten[4 + w * 4] = 3.0;
        let l = weighted_centroids(&mask, &inten, w, h, 0).unwrap();
        assert_eq!(l.len(), 1);
        assert_eq!(l[0].x, 3.75);
        assert_eq!(l[0].z, 4.0);
        assert_eq!(l[0].intensity, 4.0);
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let (w, h) = (5, 5);
        let mut mask = vec![false; w * h];
        mask[1 + w] = true;
        mask[2 + 2 * w] = true;
        mask[4 + 4 * w] = true;
        let inten = vec![1.0f64; w * h];
        let l = weighted_centroids(&mask, &inten, w, h, 2).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!((l[0].x, l[0].z), (1.5, 1.5));
        assert_eq!((l[1].x, l[1].z, l[1].frame), (4.0, 4.0, 2));
    }

    #[test]
    fn default_geometry() {
        assert_eq!(LocalizeParams::default_window(128, 128), 17);
        assert_eq!(LocalizeParams::default_window(64, 40), 5);
        assert_eq!(LocalizeParams::default_window(20, 20), 3);
        assert_eq!(LocalizeParams::default_crop(7, 5), 4);
    }
}
