//! Training data: PNG loading, a seeded synthetic corpus, and aligned
//! low/high-resolution patch sampling.
//!
//! Patch pairs are produced by cropping the *high-resolution* image first
//! and bicubic-downscaling the crop. That order makes the pair exactly
//! consistent — the low-resolution patch is bit-for-bit the downscale of
//! its high-resolution partner — whereas cropping a pre-downscaled image
//! would differ near crop edges, where the bicubic support would have
//! reached pixels outside the crop.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Prng, Scalar, Tensor4};
use crate::train::bicubic::bicubic_downscale;

/// A bag of images, each `(1, colors, h, w)` with values in `[0, 1]`.
/// Sizes may differ between images; channel count may not.
#[derive(Clone)]
pub struct Dataset<T> {
    images: Vec<Tensor4<T>>,
    colors: usize,
}

impl<T: Scalar> Dataset<T> {
    /// Wrap pre-built images, checking the channel invariant.
    pub fn from_images(images: Vec<Tensor4<T>>) -> Result<Self> {
        let colors = match images.first() {
            Some(img) => img.c(),
            None => {
                return Err(Error::invalid(
                    "Dataset::from_images",
                    "a dataset needs at least one image".to_string(),
                ))
            }
        };
        for (i, img) in images.iter().enumerate() {
            if img.c() != colors || img.n() != 1 {
                return Err(Error::invalid(
                    "Dataset::from_images",
                    format!(
                        "image {i} has dims {:?}; expected (1, {colors}, _, _)",
                        img.dims()
                    ),
                ));
            }
        }
        Ok(Dataset { images, colors })
    }

    /// Load every `.png` in a directory, sorted by file name so the
    /// dataset order (and with it, every seeded sampling decision) does not
    /// depend on directory iteration order.
    pub fn from_dir(dir: &Path, colors: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::invalid(
                "Dataset::from_dir",
                format!("no .png files in {}", dir.display()),
            ));
        }
        let images = paths
            .iter()
            .map(|p| load_png(p, colors))
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_images(images)
    }

    /// Procedural corpus: smooth gradients layered with random rectangles,
    /// disks, and sinusoidal texture. Content is fully determined by the
    /// RNG, so a seed pins the corpus. The images contain both sharp edges
    /// and smooth shading — enough structure for a super-resolution
    /// network to have something to learn.
    pub fn synthetic(
        count: usize,
        height: usize,
        width: usize,
        colors: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        if count == 0 || height < 8 || width < 8 {
            return Err(Error::invalid(
                "Dataset::synthetic",
                format!("need count >= 1 and size >= 8x8, got {count} at {height}x{width}"),
            ));
        }
        if colors != 1 && colors != 3 {
            return Err(Error::invalid(
                "Dataset::synthetic",
                format!("colors {colors} must be 1 or 3"),
            ));
        }
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            images.push(synthetic_image(height, width, colors, rng)?);
        }
        Dataset::from_images(images)
    }

    /// Number of images.
    pub fn len(&self) -> usize {
        self.images.len()
    }

    /// True when the dataset holds no images (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Channel count shared by every image.
    pub fn colors(&self) -> usize {
        self.colors
    }

    /// The images themselves.
    pub fn images(&self) -> &[Tensor4<T>] {
        &self.images
    }

    /// Split off the last `count` images as a validation set, keeping the
    /// rest for training. Because [`Self::from_dir`] sorts by file name,
    /// the split is deterministic. Both halves must end up non-empty.
    pub fn split_validation(mut self, count: usize) -> Result<(Self, Self)> {
        if count == 0 || count >= self.images.len() {
            return Err(Error::invalid(
                "Dataset::split_validation",
                format!(
                    "cannot split {} validation images from a {}-image dataset",
                    count,
                    self.images.len()
                ),
            ));
        }
        let val = self.images.split_off(self.images.len() - count);
        let colors = self.colors;
        Ok((
            Dataset {
                images: self.images,
                colors,
            },
            Dataset {
                images: val,
                colors,
            },
        ))
    }
}

fn synthetic_image<T: Scalar>(
    h: usize,
    w: usize,
    colors: usize,
    rng: &mut Prng,
) -> Result<Tensor4<T>> {
    // f64 canvas, clamped and rounded once at the end.
    let mut canvas = vec![0.0f64; colors * h * w];
    // Base gradient per channel.
    for ch in 0..colors {
        let base = 0.25 + 0.5 * rng.uniform_f64();
        let gx = (rng.uniform_f64() - 0.5) * 0.6;
        let gy = (rng.uniform_f64() - 0.5) * 0.6;
        for y in 0..h {
            for x in 0..w {
                canvas[(ch * h + y) * w + x] =
                    base + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            }
        }
    }
    // Opaque shapes: rectangles and disks with per-channel intensities.
    let shapes = 6 + rng.index(6);
    for _ in 0..shapes {
        let vals: Vec<f64> = (0..colors).map(|_| rng.uniform_f64()).collect();
        let cy = rng.index(h);
        let cx = rng.index(w);
        let ry = 2 + rng.index(h / 3);
        let rx = 2 + rng.index(w / 3);
        let disk = rng.index(2) == 0;
        for y in cy.saturating_sub(ry)..(cy + ry).min(h) {
            for x in cx.saturating_sub(rx)..(cx + rx).min(w) {
                let inside = if disk {
                    let dy = (y as f64 - cy as f64) / ry as f64;
                    let dx = (x as f64 - cx as f64) / rx as f64;
                    dy * dy + dx * dx <= 1.0
                } else {
                    true
                };
                if inside {
                    for ch in 0..colors {
                        canvas[(ch * h + y) * w + x] = vals[ch];
                    }
                }
            }
        }
    }
    // A sinusoidal texture field over everything, low amplitude.
    let fy = 0.2 + rng.uniform_f64() * 0.8;
    let fx = 0.2 + rng.uniform_f64() * 0.8;
    let phase = rng.uniform_f64() * std::f64::consts::TAU;
    let amp = 0.03 + 0.05 * rng.uniform_f64();
    for ch in 0..colors {
        for y in 0..h {
            for x in 0..w {
                let t = (y as f64 * fy + x as f64 * fx + phase).sin();
                canvas[(ch * h + y) * w + x] += amp * t;
            }
        }
    }
    let data: Vec<T> = canvas
        .into_iter()
        .map(|v| T::from_f64(v.clamp(0.0, 1.0)))
        .collect();
    Tensor4::from_vec([1, colors, h, w], data)
}

/// One training batch: aligned `(low, high)` patch stacks with dims
/// `(batch, colors, p, p)` and `(batch, colors, p*scale, p*scale)`.
///
/// Each pair comes from a uniformly chosen image and position: the
/// high-resolution patch is cropped first, then downscaled, so
/// `low == bicubic_downscale(high, scale)` holds exactly per pair.
pub fn sample_patch_batch<T: Scalar>(
    ds: &Dataset<T>,
    batch: usize,
    patch: usize,
    scale: usize,
    rng: &mut Prng,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    if batch == 0 || patch == 0 || scale == 0 {
        return Err(Error::invalid(
            "sample_patch_batch",
            format!("batch {batch}, patch {patch}, scale {scale} must all be >= 1"),
        ));
    }
    let hp = patch * scale;
    let colors = ds.colors();
    let mut lo = Tensor4::zeros([batch, colors, patch, patch]);
    let mut hi = Tensor4::zeros([batch, colors, hp, hp]);
    for b in 0..batch {
        let img = &ds.images()[rng.index(ds.len())];
        let [_, _, h, w] = img.dims();
        if h < hp || w < hp {
            return Err(Error::ImageTooSmall {
                op: "sample_patch_batch",
                msg: format!("image {h}x{w} cannot supply a {hp}x{hp} crop"),
            });
        }
        let y0 = rng.index(h - hp + 1);
        let x0 = rng.index(w - hp + 1);
        let mut crop = Tensor4::zeros([1, colors, hp, hp]);
        for ch in 0..colors {
            for y in 0..hp {
                let src = img.index(0, ch, y0 + y, x0);
                let dst = crop.index(0, ch, y, 0);
                crop.data_mut()[dst..dst + hp].copy_from_slice(&img.data()[src..src + hp]);
            }
        }
        let small = bicubic_downscale(&crop, scale)?;
        for ch in 0..colors {
            for y in 0..hp {
                let src = crop.index(0, ch, y, 0);
                let dst = hi.index(b, ch, y, 0);
                let row = crop.data()[src..src + hp].to_vec();
                hi.data_mut()[dst..dst + hp].copy_from_slice(&row);
            }
            for y in 0..patch {
                let src = small.index(0, ch, y, 0);
                let dst = lo.index(b, ch, y, 0);
                let row = small.data()[src..src + patch].to_vec();
                lo.data_mut()[dst..dst + patch].copy_from_slice(&row);
            }
        }
    }
    Ok((lo, hi))
}

/// Load a PNG as `(1, colors, h, w)` in `[0, 1]`.
///
/// With `colors == 3` the file is decoded to RGB. With `colors == 1` a
/// grayscale file is taken as-is and a color file is reduced with the
/// standard luma weights (the same ones [`crate::diagnostics::rgb_to_y`]
/// uses, scaled back to `[0, 1]`).
pub fn load_png<T: Scalar>(path: &Path, colors: usize) -> Result<Tensor4<T>> {
    if colors != 1 && colors != 3 {
        return Err(Error::invalid(
            "load_png",
            format!("colors {colors} must be 1 or 3"),
        ));
    }
    let img = image::open(path)?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Tensor4::zeros([1, colors, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = rgb.get_pixel(x as u32, y as u32);
            let (r, g, b) = (
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            );
            if colors == 3 {
                out.set(0, 0, y, x, T::from_f64(r));
                out.set(0, 1, y, x, T::from_f64(g));
                out.set(0, 2, y, x, T::from_f64(b));
            } else {
                // Luma on the 0-255 scale divided back to [0, 1].
                let yv = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0;
                out.set(0, 0, y, x, T::from_f64(yv));
            }
        }
    }
    Ok(out)
}

/// Write `(1, 1|3, h, w)` values in `[0, 1]` as an 8-bit PNG, clamping
/// out-of-range values.
pub fn save_png<T: Scalar>(path: &Path, img: &Tensor4<T>) -> Result<()> {
    let [n, c, h, w] = img.dims();
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::invalid(
            "save_png",
            format!("expected dims (1, 1|3, h, w), got {:?}", img.dims()),
        ));
    }
    let to_u8 = |v: T| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 1 {
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(img.at(0, 0, y, x))]));
            }
        }
        buf.save(path)?;
    } else {
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = image::Rgb([
                    to_u8(img.at(0, 0, y, x)),
                    to_u8(img.at(0, 1, y, x)),
                    to_u8(img.at(0, 2, y, x)),
                ]);
                buf.put_pixel(x as u32, y as u32, px);
            }
        }
        buf.save(path)?;
    }
    Ok(())
}
