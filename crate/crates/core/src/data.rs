//! Image I/O, corpus loading and the synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// A loaded corpus plus the files that failed to decode.
#[derive(Debug)]
pub struct Corpus {
    pub images: Vec<Tensor>,
    pub paths: Vec<PathBuf>,
    pub skipped: Vec<(PathBuf, Error)>,
}

/// Center-crops to a square, resizes bilinearly to `size` and scales to
/// [0,1]. Returns a (3, size, size) tensor.
pub fn prepare_image(img: &DynamicImage, size: usize) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, size, size], data)
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    prepare_image(&img, size)
}

/// Loads every decodable image in `dir` in alphabetical file-name order.
/// Undecodable files are collected in [`Corpus::skipped`].
pub fn load_corpus(dir: &Path, size: usize) -> Result<Corpus> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut corpus = Corpus {
        images: Vec::new(),
        paths: Vec::new(),
        skipped: Vec::new(),
    };
    for path in files {
        match load_image(&path, size) {
            Ok(t) => {
                corpus.images.push(t);
                corpus.paths.push(path);
            }
            Err(e) => corpus.skipped.push((path, e)),
        }
    }
    if corpus.images.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(corpus)
}

/// value·255 rounded half up and clamped to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Converts a (3,H,W) or (1,3,H,W) tensor to an 8-bit RGB image.
pub fn to_rgb_image(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected (3,H,W) or (1,3,H,W)".into(),
            })
        }
    };
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])])
    }))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let img = to_rgb_image(t)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: PathBuf::from("<memory>"),
        source,
    })?;
    Ok(buf.into_inner())
}

/// Writes a PNG atomically.
pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(t)?)
}

pub const SYNTHETIC_COUNT: usize = 8;
pub const SYNTHETIC_SIZE: usize = 32;

/// Eight seeded 32×32 images: two gradients, three checkerboards and three
/// Gaussian-blob fields, each with random colors.
pub fn synthetic_corpus(seed: u64) -> Vec<Tensor> {
    let mut rng = SplitMix64::new(seed);
    let n = SYNTHETIC_SIZE;
    let color = |rng: &mut SplitMix64| [rng.next_f64(), rng.next_f64(), rng.next_f64()];
    (0..SYNTHETIC_COUNT)
        .map(|k| {
            let (a, b) = (color(&mut rng), color(&mut rng));
            let field: Vec<f64> = match k {
                0 | 1 => {
                    let angle = rng.uniform(0.0, std::f64::consts::TAU);
                    let (dx, dy) = (angle.cos(), angle.sin());
                    (0..n * n)
                        .map(|i| {
                            let (y, x) = ((i / n) as f64 / (n - 1) as f64, (i % n) as f64 / (n - 1) as f64);
                            (((x - 0.5) * dx + (y - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0)
                        })
                        .collect()
                }
                2..=4 => {
                    let cell = [2, 4, 8][k - 2];
                    (0..n * n)
                        .map(|i| (((i / n) / cell + (i % n) / cell) % 2) as f64)
                        .collect()
                }
                _ => {
                    let blobs: Vec<[f64; 3]> = (0..3)
                        .map(|_| [rng.uniform(0.0, n as f64), rng.uniform(0.0, n as f64), rng.uniform(3.0, 8.0)])
                        .collect();
                    (0..n * n)
                        .map(|i| {
                            let (y, x) = ((i / n) as f64, (i % n) as f64);
                            let v: f64 = blobs
                                .iter()
                                .map(|[cx, cy, s]| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
                                .sum();
                            v.min(1.0)
                        })
                        .collect()
                }
            };
            let mut data = vec![0.0; 3 * n * n];
            for c in 0..3 {
                for (i, &t) in field.iter().enumerate() {
                    data[c * n * n + i] = a[c] * (1.0 - t) + b[c] * t;
                }
            }
            Tensor::new(&[3, n, n], data).expect("synthetic image shape")
        })
        .collect()
}

/// Writes the synthetic corpus as `synth_00.png` … `synth_07.png`.
pub fn write_synthetic_corpus(dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    synthetic_corpus(seed)
        .iter()
        .enumerate()
        .map(|(k, img)| {
            let path = dir.join(format!("synth_{k:02}.png"));
            save_png(img, &path)?;
            Ok(path)
        })
        .collect()
}
