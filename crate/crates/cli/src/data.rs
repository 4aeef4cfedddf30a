//! Samples on disk: one directory, five images per sample.
//!
//! Sample `i` is stored as `NNNNN_image.ppm`, `NNNNN_trimap.pgm`,
//! `NNNNN_alpha.pgm`, `NNNNN_fg.ppm` and `NNNNN_bg.ppm`. Only image, trimap
//! and alpha are needed for evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use indexnet_core::synthdata::MattingSample;

use crate::error::{io_err, CliError, Result};
use crate::image::{decode_trimap, Image};

pub fn sample_stem(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:05}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_sample(stem: &Path, s: &MattingSample) -> Result<()> {
    let (w, h) = (s.width, s.height);
    Image::rgb(w, h, s.image.clone()).write(&with_suffix(stem, "_image.ppm"))?;
    Image::gray(w, h, s.trimap.clone()).write(&with_suffix(stem, "_trimap.pgm"))?;
    Image::gray(w, h, s.alpha.clone()).write(&with_suffix(stem, "_alpha.pgm"))?;
    Image::rgb(w, h, s.fg.clone()).write(&with_suffix(stem, "_fg.ppm"))?;
    Image::rgb(w, h, s.bg.clone()).write(&with_suffix(stem, "_bg.ppm"))
}

/// An image with its trimap and ground-truth alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub trimap: Vec<u8>,
    pub alpha: Vec<u8>,
}

/// Reads an RGB image and a trimap of the same size.
pub fn read_pair(image: &Path, trimap: &Path) -> Result<(Image, Vec<u8>)> {
    let img = Image::read_expect(image, 3)?;
    let tri = Image::read_expect(trimap, 1)?;
    if (tri.width, tri.height) != (img.width, img.height) {
        return Err(CliError::Image {
            path: trimap.into(),
            msg: format!("trimap is {}x{}, image is {}x{}", tri.width, tri.height, img.width, img.height),
        });
    }
    Ok((img, decode_trimap(&tri.data)))
}

/// Every sample in `dir`, ordered by name.
pub fn read_dir(dir: &Path) -> Result<Vec<EvalItem>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_image.ppm")).map(str::to_string))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Usage(format!("{} holds no *_image.ppm samples", dir.display())));
    }
    stems
        .into_iter()
        .map(|name| {
            let stem = dir.join(&name);
            let (img, trimap) = read_pair(&with_suffix(&stem, "_image.ppm"), &with_suffix(&stem, "_trimap.pgm"))?;
            let alpha_path = with_suffix(&stem, "_alpha.pgm");
            let alpha = Image::read_expect(&alpha_path, 1)?;
            if alpha.data.len() != trimap.len() {
                return Err(CliError::Image { path: alpha_path, msg: "alpha size differs from the image".into() });
            }
            Ok(EvalItem {
                name,
                width: img.width,
                height: img.height,
                image: img.data,
                trimap,
                alpha: alpha.data,
            })
        })
        .collect()
}
