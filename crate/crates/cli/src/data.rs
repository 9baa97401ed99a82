//! PNG ingest and export, patching, deterministic splits and batch assembly.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use log::warn;
use rand::Rng;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use diffnca_core::rng::{domain, stream};
use diffnca_core::synthetic::synthetic_image;
use diffnca_core::Tensor;

use crate::config::DataSection;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// `round((clamp(x) + 1) · 127.5)`; NaN has no byte.
pub fn unit_to_byte(x: f32) -> Option<u8> {
    if x.is_nan() {
        return None;
    }
    Some(((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = byte_to_unit(px.0[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("shape matches")
}

pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        &[3, h, w] => (h, w),
        s => return Err(CliError::Config(format!("expected a [3, H, W] image, got {s:?}"))),
    };
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = unit_to_byte(t.data()[(c * h + y) * w + x]).ok_or_else(|| {
                    CliError::Core(diffnca_core::Error::NumericFailure {
                        stage: diffnca_core::Stage::Image,
                        step: 0,
                    })
                })?;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| CliError::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(image_to_tensor(&img.to_rgb8()))
}

/// Writes an 8-bit RGB PNG, creating parent folders.
pub fn export_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = tensor_to_image(t)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

/// Mean over `factor x factor` blocks; trailing rows/columns that do not fill a block are dropped.
pub fn box_downscale(t: &Tensor<f32>, factor: usize) -> Tensor<f32> {
    let &[c, h, w] = t.shape() else {
        panic!("box_downscale expects [C, H, W]")
    };
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let norm = 1.0 / (factor * factor) as f32;
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += t.data()[(ci * h + y * factor + dy) * w + x * factor + dx];
                    }
                }
                out.data_mut()[(ci * oh + y) * ow + x] = acc * norm;
            }
        }
    }
    out
}

/// `[3, size, size]` crop with top-left corner `(top, left)`.
pub fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let &[c, h, w] = t.shape() else {
        panic!("crop expects [C, H, W]")
    };
    assert!(top + size <= h && left + size <= w, "crop outside image");
    let mut data = Vec::with_capacity(c * size * size);
    for ci in 0..c {
        for y in top..top + size {
            let row = (ci * h + y) * w;
            data.extend_from_slice(&t.data()[row + left..row + left + size]);
        }
    }
    Tensor::from_vec(&[c, size, size], data).expect("shape matches")
}

/// Non-overlapping-when-`stride == size` grid of patches, row-major.
pub fn grid_patches(t: &Tensor<f32>, size: usize, stride: usize) -> Vec<Tensor<f32>> {
    let &[_, h, w] = t.shape() else {
        panic!("grid_patches expects [C, H, W]")
    };
    let mut out = Vec::new();
    if h < size || w < size {
        return out;
    }
    for top in (0..=h - size).step_by(stride) {
        for left in (0..=w - size).step_by(stride) {
            out.push(crop(t, top, left, size));
        }
    }
    out
}

/// Split of a file, decided by the SHA-256 of its name so that adding files never moves
/// existing ones.
pub fn split_of(name: &str, fractions: [f64; 3]) -> Split {
    let digest = Sha256::digest(name.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    let u = u64::from_be_bytes(head) as f64 / 18_446_744_073_709_551_616.0;
    if u < fractions[0] {
        Split::Train
    } else if u < fractions[0] + fractions[1] {
        Split::Val
    } else {
        Split::Test
    }
}

/// Source images of one split, each at least `patch_size` on both sides.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Tensor<f32>>,
    pub val: Vec<Tensor<f32>>,
    pub test: Vec<Tensor<f32>>,
    /// Names in the same order, for provenance.
    pub test_names: Vec<String>,
    pub patch_size: usize,
    /// Unreadable or too-small files that were left out.
    pub skipped: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Tensor<f32>] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Training batch of step `step`: images drawn with `(seed, BATCH, step)`, crops with
    /// `(seed, CROP, step)`.
    pub fn draw_batch(&self, batch: usize, seed: u64, step: u64) -> Tensor<f32> {
        let p = self.patch_size;
        let mut pick = stream(seed, &[domain::BATCH, step]);
        let mut place = stream(seed, &[domain::CROP, step]);
        let mut out = Tensor::zeros(&[batch, 3, p, p]);
        for b in 0..batch {
            let img = &self.train[pick.gen_range(0..self.train.len())];
            let &[_, h, w] = img.shape() else { unreachable!() };
            let top = place.gen_range(0..=h - p);
            let left = place.gen_range(0..=w - p);
            out.outer_mut(b).copy_from_slice(crop(img, top, left, p).data());
        }
        out
    }

    /// Deterministic evaluation patches: the stride-`patch` grids of the split, in order,
    /// truncated to `count` (cycling when the split is small).
    pub fn eval_batch(&self, split: Split, count: usize) -> Option<Tensor<f32>> {
        let p = self.patch_size;
        let patches: Vec<Tensor<f32>> = self
            .split(split)
            .iter()
            .flat_map(|img| grid_patches(img, p, p))
            .collect();
        if patches.is_empty() {
            return None;
        }
        let mut out = Tensor::zeros(&[count, 3, p, p]);
        for b in 0..count {
            out.outer_mut(b).copy_from_slice(patches[b % patches.len()].data());
        }
        Some(out)
    }
}

/// PNG files under `root`, in lexicographic path order.
pub fn list_pngs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(CliError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn preprocess(t: Tensor<f32>, spec: &DataSection) -> Result<Tensor<f32>> {
    let mut t = t;
    if let Some([h, w]) = spec.resize {
        let img = tensor_to_image(&t)?;
        let resized = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        t = image_to_tensor(&resized);
    }
    if let Some(f) = spec.downscale_factor.filter(|&f| f > 1) {
        t = box_downscale(&t, f);
    }
    Ok(t)
}

/// Loads the dataset described by `spec` and assigns every source to a split.
pub fn ingest(spec: &DataSection) -> Result<Dataset> {
    let mut ds = Dataset {
        patch_size: spec.patch_size,
        ..Dataset::default()
    };
    let push = |ds: &mut Dataset, name: String, t: Tensor<f32>| {
        let &[_, h, w] = t.shape() else { unreachable!() };
        if h < spec.patch_size || w < spec.patch_size {
            warn!("skipping {name}: {h}x{w} is smaller than the {} patch", spec.patch_size);
            ds.skipped += 1;
            return;
        }
        match split_of(&name, spec.split) {
            Split::Train => ds.train.push(t),
            Split::Val => ds.val.push(t),
            Split::Test => {
                ds.test.push(t);
                ds.test_names.push(name);
            }
        }
    };
    if let Some(s) = &spec.synthetic {
        for i in 0..s.count {
            let t = synthetic_image::<f32>(s.kind.into(), s.size, s.seed, i as u64);
            push(&mut ds, format!("synthetic-{i:06}"), t);
        }
    } else if let Some(root) = &spec.root {
        for path in list_pngs(root)? {
            let name = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            match load_png(&path).and_then(|t| preprocess(t, spec)) {
                Ok(t) => push(&mut ds, name, t),
                Err(e) => {
                    warn!("skipping unreadable {}: {e}", path.display());
                    ds.skipped += 1;
                }
            }
        }
    }
    if ds.train.is_empty() {
        return Err(CliError::Dataset(format!(
            "no usable training images ({} skipped)",
            ds.skipped
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(unit_to_byte(-1.0), Some(0));
        assert_eq!(unit_to_byte(1.0), Some(255));
        assert_eq!(unit_to_byte(0.0), Some(128));
        assert_eq!(unit_to_byte(7.0), Some(255));
        assert_eq!(unit_to_byte(f32::NAN), None);
    }

    proptest! {
        #[test]
        fn bytes_survive_the_round_trip(b in any::<u8>()) {
            prop_assert_eq!(unit_to_byte(byte_to_unit(b)), Some(b));
        }

        #[test]
        fn quantization_error_is_bounded(x in -1.0f32..=1.0) {
            let back = byte_to_unit(unit_to_byte(x).unwrap());
            prop_assert!((back - x).abs() <= 1.0 / 127.5);
        }
    }

    #[test]
    fn patch_grid_count() {
        let t = Tensor::<f32>::zeros(&[3, 256, 256]);
        assert_eq!(grid_patches(&t, 64, 64).len(), 16);
        assert_eq!(grid_patches(&t, 64, 32).len(), 49);
        assert!(grid_patches(&Tensor::<f32>::zeros(&[3, 8, 8]), 16, 16).is_empty());
    }

    #[test]
    fn crop_and_downscale_oracles() {
        let data: Vec<f32> = (0..3 * 4 * 6).map(|v| v as f32).collect();
        let t = Tensor::from_vec(&[3, 4, 6], data).unwrap();
        let c = crop(&t, 1, 2, 2);
        assert_eq!(
            c.data(),
            &[8.0, 9.0, 14.0, 15.0, 32.0, 33.0, 38.0, 39.0, 56.0, 57.0, 62.0, 63.0]
        );
        let d = box_downscale(&t, 2);
        assert_eq!(d.shape(), &[3, 2, 3]);
        // block (0,0) of channel 0: 0, 1, 6, 7
        assert_eq!(d.data()[0], 3.5);
        assert_eq!(d.data()[5], (16.0 + 17.0 + 22.0 + 23.0) / 4.0);
    }

    #[test]
    fn split_proportions_and_determinism() {
        let fr = [0.8, 0.1, 0.1];
        let mut counts = [0usize; 3];
        for i in 0..5000 {
            let name = format!("img_{i:05}.png");
            let s = split_of(&name, fr);
            assert_eq!(s, split_of(&name, fr));
            counts[s as usize] += 1;
        }
        for (c, f) in counts.iter().zip(fr) {
            assert!((*c as f64 / 5000.0 - f).abs() < 0.02, "{counts:?}");
        }
    }
}
