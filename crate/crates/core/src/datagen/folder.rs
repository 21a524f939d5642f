//! On-disk datasets laid out as `root/<category>/<instance>/<view>.ppm`
//! (binary P6, 8-bit).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use vinil_tensor::Tensor;

use super::render::{gallery_views, validate_gallery_fraction};
use super::{Sample, Split, CHANNELS};
use crate::error::{Error, Result};

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.into() }
}

/// Parses a binary PPM into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated PPM header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P6" {
        return Err(image_err(path, format!("expected P6 magic, found `{}`", header[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| image_err(path, format!("bad {what} `{s}`")))
    };
    let (width, height, maxval) = (parse(&header[1], "width")?, parse(&header[2], "height")?, parse(&header[3], "maxval")?);
    if maxval != 255 {
        return Err(image_err(path, format!("only 8-bit PPM is supported, maxval is {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(image_err(path, "zero-sized image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    let plane = width * height;
    if raster.len() != plane * CHANNELS {
        return Err(image_err(
            path,
            format!("expected {} raster bytes, found {}", plane * CHANNELS, raster.len()),
        ));
    }
    let mut data = vec![0.0; CHANNELS * plane];
    for (i, px) in raster.chunks(CHANNELS).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = b as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![CHANNELS, height, width], data)?)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let &[CHANNELS, height, width] = image.shape() else {
        return Err(image_err(path, format!("expected a [3,H,W] image, got {:?}", image.shape())));
    };
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let data = image.data();
    for i in 0..plane {
        for c in 0..CHANNELS {
            out.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads a folder dataset. Category, instance and view ids follow the
/// lexicographic order of directory and file names. Every sample comes back
/// as [`Split::Train`]; see [`assign_gallery_split`].
pub fn load_folder_dataset(root: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    let mut size: Option<(Vec<usize>, PathBuf)> = None;
    let mut instance_id = 0;
    for (category_id, cat_dir) in sorted_entries(root, true)?.into_iter().enumerate() {
        for inst_dir in sorted_entries(&cat_dir, true)? {
            for (view_id, file) in sorted_entries(&inst_dir, false)?.into_iter().enumerate() {
                let image = read_ppm(&file)?;
                match &size {
                    Some((shape, first)) if shape.as_slice() != image.shape() => {
                        return Err(image_err(
                            &file,
                            format!(
                                "image is {:?} but {} is {:?}",
                                image.shape(),
                                first.display(),
                                shape
                            ),
                        ));
                    }
                    Some(_) => {}
                    None => size = Some((image.shape().to_vec(), file.clone())),
                }
                samples.push(Sample { image, category_id, instance_id, view_id, split: Split::Train });
            }
            instance_id += 1;
        }
    }
    if samples.is_empty() {
        log::warn!("no PPM images found under {}", root.display());
    }
    Ok(samples)
}

/// Writes samples as `root/cat_XX/inst_XXXX/view_XXX.ppm`. Zero-padded
/// names keep the reload order identical to the id order.
pub fn save_folder_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let dir = root
            .join(format!("cat_{:02}", s.category_id))
            .join(format!("inst_{:04}", s.instance_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_ppm(&dir.join(format!("view_{:03}.ppm", s.view_id)), &s.image)?;
    }
    Ok(())
}

/// Marks `round(fraction · views)` views of every instance as gallery, using
/// the same draw as the synthetic generator for a given seed.
pub fn assign_gallery_split(samples: &mut [Sample], fraction: f64, seed: u64) -> Result<()> {
    let mut views: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples.iter() {
        *views.entry(s.instance_id).or_default() += 1;
    }
    let mut masks = BTreeMap::new();
    for (&inst, &n) in &views {
        validate_gallery_fraction(n, fraction)?;
        masks.insert(inst, gallery_views(seed, inst, n, fraction));
    }
    for s in samples.iter_mut() {
        let mask = &masks[&s.instance_id];
        let held_out = *mask.get(s.view_id).ok_or_else(|| {
            Error::Data(format!("instance {} has non-contiguous view id {}", s.instance_id, s.view_id))
        })?;
        s.split = if held_out { Split::Gallery } else { Split::Train };
    }
    Ok(())
}
