use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, RgbImage};

use super::{EdgeParams, Sample};
use crate::error::{IcegError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Resolves `root/<split>` when it exists, otherwise `root` itself.
fn split_root(root: &Path, split: Split) -> PathBuf {
    let nested = root.join(split.dir_name());
    if nested.join("images").is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| IcegError::io(format!("reading {}", dir.display()), e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| IcegError::io(format!("reading {}", dir.display()), e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| IcegError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a single-channel image as soft values in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let m = open(path)?.into_luma8();
    let (w, h) = m.dimensions();
    Ok((h as usize, w as usize, m.pixels().map(|p| p.0[0] as f32 / 255.0).collect()))
}

/// Reads a single-channel mask, binarized at 128.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let m = open(path)?.into_luma8();
    let (w, h) = m.dimensions();
    let data = m.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok((h as usize, w as usize, data))
}

/// Reads an RGB image as a channel-major plane stack in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f32 / 255.0;
        }
    }
    Ok((h as usize, w as usize, data))
}

/// Loads every `images/<id>.png` with its `masks/<id>.png`, sorted by id.
///
/// When `root/train` or `root/test` holds the layout, the split selects it;
/// otherwise `root` is read directly.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let base = split_root(root, split);
    let (img_dir, mask_dir) = (base.join("images"), base.join("masks"));
    if !img_dir.is_dir() || !mask_dir.is_dir() {
        return Err(IcegError::Load(format!(
            "{} must contain images/ and masks/",
            base.display()
        )));
    }
    let mut samples = Vec::new();
    for stem in png_stems(&img_dir)? {
        let mask_path = mask_dir.join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(IcegError::MissingMask {
                stem,
                dir: mask_dir.clone(),
            });
        }
        let (h, w, image) = read_image(&img_dir.join(format!("{stem}.png")))?;
        let (mh, mw, mask) = read_mask(&mask_path)?;
        if (h, w) != (mh, mw) {
            return Err(IcegError::Dimension(format!(
                "{stem}: image is {h}x{w} but mask is {mh}x{mw}"
            )));
        }
        samples.push(Sample::new(stem, h, w, image, mask, EdgeParams::for_side(h.min(w)))?);
    }
    Ok(samples)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a channel-major RGB plane stack as an 8-bit PNG.
pub fn write_image(path: &Path, h: usize, w: usize, data: &[f32]) -> Result<()> {
    let plane = h * w;
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(data[i]), quantize(data[plane + i]), quantize(data[2 * plane + i])])
    });
    img.save(path).map_err(|source| IcegError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a single plane in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, h: usize, w: usize, data: &[f32]) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([quantize(data[y as usize * w + x as usize])])
    });
    img.save(path).map_err(|source| IcegError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Exports samples to `root/{images,masks}/<id>.png` plus a `manifest.json`
/// listing the ids.
pub fn save_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| IcegError::io(format!("creating {}", d.display()), e))?;
    }
    for s in samples {
        write_image(&img_dir.join(format!("{}.png", s.id)), s.height, s.width, &s.image)?;
        write_gray(&mask_dir.join(format!("{}.png", s.id)), s.height, s.width, &s.mask)?;
    }
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let manifest = root.join("manifest.json");
    fs::write(&manifest, serde_json::to_string_pretty(&ids)?)
        .map_err(|e| IcegError::io(format!("writing {}", manifest.display()), e))
}
