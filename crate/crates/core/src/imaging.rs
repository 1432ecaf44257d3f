//! Plain RGB image helpers: PNG I/O, resizing, blurring, luminance.

use std::path::Path;

use image::{imageops, ImageBuffer, Luma, Rgb, Rgb32FImage};
use ndarray::{Array2, Array3};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

/// `height × width × 3` RGB image with channel values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Binary mask, `true` marks forged pixels.
pub type Mask = Array2<bool>;

pub fn luminance(img: &Image) -> Array2<f64> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]]
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Half-sample symmetric extension: `..., x1, x0 | x0, x1, ... | x(n-1), x(n-2), ...`
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

/// Separable Gaussian blur of a single plane with symmetric borders.
pub fn gaussian_blur_plane(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = plane.dim();
    let horiz = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * plane[[y, reflect(x as isize + i as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz[[reflect(y as isize + i as isize - r, h), x]])
            .sum::<f64>()
    })
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let (h, w, c) = img.dim();
    let mut out = Image::zeros((h, w, c));
    for ch in 0..c {
        let plane = img.index_axis(ndarray::Axis(2), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(2), ch)
            .assign(&gaussian_blur_plane(&plane, sigma));
    }
    out
}

fn to_rgb32f(img: &Image) -> Rgb32FImage {
    let (h, w, _) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            img[[y, x, 0]] as f32,
            img[[y, x, 1]] as f32,
            img[[y, x, 2]] as f32,
        ])
    })
}

fn from_rgb32f(buf: &Rgb32FImage) -> Image {
    let (w, h) = buf.dimensions();
    Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        (buf.get_pixel(x as u32, y as u32)[c] as f64).clamp(0.0, 1.0)
    })
}

/// Resizes to `size × size`; a no-op when already that size.
pub fn resize(img: &Image, size: usize) -> Image {
    let (h, w, _) = img.dim();
    if h == size && w == size {
        return img.clone();
    }
    let out = imageops::resize(
        &to_rgb32f(img),
        size as u32,
        size as u32,
        imageops::FilterType::Triangle,
    );
    from_rgb32f(&out)
}

/// Nearest-neighbor resize of a binary mask.
pub fn resize_mask(mask: &Mask, size: usize) -> Mask {
    let (h, w) = mask.dim();
    Mask::from_shape_fn((size, size), |(y, x)| {
        mask[[(y * h) / size, (x * w) / size]]
    })
}

/// Area-average downsampling of a mask to `size × size` soft targets.
pub fn mask_to_targets(mask: &Mask, size: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (y0, y1) = (y * h / size, ((y + 1) * h / size).max(y * h / size + 1));
        let (x0, x1) = (x * w / size, ((x + 1) * w / size).max(x * w / size + 1));
        let mut n = 0usize;
        let mut on = 0usize;
        for yy in y0..y1.min(h) {
            for xx in x0..x1.min(w) {
                n += 1;
                on += mask[[yy, xx]] as usize;
            }
        }
        if 2 * on >= n && on > 0 {
            1.0
        } else {
            0.0
        }
    })
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, _) = img.dim();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize(img[[y, x, 0]]),
            quantize(img[[y, x, 1]]),
            quantize(img[[y, x, 2]]),
        ])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        source: e,
    })
}

pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] {
            255
        } else {
            0
        }])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        source: e,
    })
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        source: e,
    })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Mask::from_shape_fn((h as usize, w as usize), |(y, x)| {
        g.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

/// Rounds every channel to the 8-bit grid, matching a PNG round trip.
pub fn quantized(img: &Image) -> Image {
    img.mapv(|v| quantize(v) as f64 / 255.0)
}

/// Flattens to an `(h·w) × 3` matrix in row-major pixel order.
pub fn to_matrix(img: &Image) -> Matrix {
    let (h, w, c) = img.dim();
    let data: Vec<f64> = img.as_standard_layout().iter().copied().collect();
    Matrix::from_shape_vec((h * w, c), data).expect("image to matrix")
}
