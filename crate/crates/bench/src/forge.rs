//! Writes generated plates to disk as 8-bit grayscale PNGs plus a manifest.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::ImageEncoder;
use image::codecs::png::PngEncoder;
use plate_core::forge::{forge_one, ForgeSpec, GrayImage};
use plate_core::LineLayout;
use rayon::prelude::*;

use crate::manifest::{save_manifest, DatasetManifest, ImageRecord, ManifestError};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error(transparent)]
    Spec(#[from] plate_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("encoding {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>, image::ImageError> {
    let mut out = Vec::new();
    PngEncoder::new(Cursor::new(&mut out)).write_image(
        img.pixels(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(out)
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, image::ImageError> {
    let img = image::load_from_memory(bytes)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(GrayImage::from_pixels(w as usize, h as usize, img.into_raw())
        .expect("luma buffer matches its dimensions"))
}

pub fn image_id(index: usize) -> String {
    format!("plate_{index:05}")
}

/// Generates `spec.count` images under `out_dir/images` and writes
/// `out_dir/manifest.jsonl`. Output does not depend on `threads`.
pub fn forge_dataset(spec: &ForgeSpec, out_dir: &Path, threads: usize) -> Result<DatasetManifest, ForgeError> {
    spec.validate()?;
    let image_dir = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&image_dir).map_err(|source| ForgeError::Io {
        path: image_dir.clone(),
        source,
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| ForgeError::Pool(e.to_string()))?;
    let records: Result<Vec<ImageRecord>, ForgeError> = pool.install(|| {
        (0..spec.count)
            .into_par_iter()
            .map(|i| write_one(spec, i, &image_dir))
            .collect()
    });
    let mut manifest = DatasetManifest::new(format!("synthetic-{}", spec.seed));
    manifest.seed = Some(spec.seed);
    manifest.records = records?;
    save_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn write_one(spec: &ForgeSpec, index: usize, image_dir: &Path) -> Result<ImageRecord, ForgeError> {
    let plate = forge_one(spec, index)?;
    let id = image_id(index);
    let file = format!("{id}.png");
    let path = image_dir.join(&file);
    let bytes = encode_png(&plate.image).map_err(|e| ForgeError::Encode {
        path: path.clone(),
        message: e.to_string(),
    })?;
    std::fs::write(&path, bytes).map_err(|source| ForgeError::Io { path, source })?;
    let layout = match plate.format.kind {
        LineLayout::SingleLine => "single_line",
        LineLayout::TwoLine => "two_line",
    };
    Ok(ImageRecord {
        id,
        path: format!("{IMAGE_DIR}/{file}"),
        label: Some(plate.label),
        width_px: spec.width_px as u32,
        height_px: spec.height_px as u32,
        tags: ["synthetic".to_string(), layout.to_string()].into(),
        plates: Vec::new(),
    })
}
