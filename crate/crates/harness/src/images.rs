//! Image loading and canonicalization.
//!
//! Cache keys hash the decoded RGBA8 pixels plus dimensions, never the file
//! bytes, so re-encoding the same picture does not change a key.

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use image::{ImageFormat, ImageReader};
use qask_core::model::ImageRef;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image unavailable: {0}: {1}")]
    Unavailable(String, String),
    #[error("image unavailable: {0}: cannot decode: {1}")]
    Decode(String, String),
}

#[derive(Debug)]
pub struct LoadedImage {
    pub reference: ImageRef,
    /// Bytes as stored on disk or served by the URL.
    pub bytes: Vec<u8>,
    pub mime: &'static str,
    pub width: u32,
    pub height: u32,
    /// sha256 over the canonical pixel form.
    pub digest: [u8; 32],
}

impl LoadedImage {
    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    /// The image re-encoded as PNG.
    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        if self.mime == "image/png" {
            return Ok(self.bytes.clone());
        }
        let img = image::load_from_memory(&self.bytes)
            .map_err(|e| ImageError::Decode(self.reference.to_string(), e.to_string()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImageError::Decode(self.reference.to_string(), e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Canonical byte form: `w` and `h` as big-endian u32 followed by RGBA8 pixels.
pub fn canonical_bytes(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>), image::ImageError> {
    let img = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?.decode()?;
    let rgba = img.to_rgba8();
    let (w, h) = rgba.dimensions();
    let mut out = Vec::with_capacity(8 + rgba.as_raw().len());
    out.extend_from_slice(&w.to_be_bytes());
    out.extend_from_slice(&h.to_be_bytes());
    out.extend_from_slice(rgba.as_raw());
    Ok((w, h, out))
}

fn mime_of(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(ImageFormat::Png) => "image/png",
        Ok(ImageFormat::Jpeg) => "image/jpeg",
        Ok(ImageFormat::WebP) => "image/webp",
        Ok(ImageFormat::Gif) => "image/gif",
        Ok(ImageFormat::Bmp) => "image/bmp",
        _ => "application/octet-stream",
    }
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

/// Resolves image references against a base directory (or by URL) and
/// memoizes decoded results.
#[derive(Clone)]
pub struct ImageStore {
    base_dir: PathBuf,
    loaded: Arc<Mutex<HashMap<ImageRef, Arc<LoadedImage>>>>,
}

impl ImageStore {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        ImageStore {
            base_dir: base_dir.into(),
            loaded: Arc::default(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve_path(&self, r: &ImageRef) -> PathBuf {
        let p = Path::new(r.as_str());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn fetch(&self, r: &ImageRef) -> Result<Vec<u8>, ImageError> {
        let unavailable = |e: String| ImageError::Unavailable(r.to_string(), e);
        if is_url(r.as_str()) {
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .map_err(|e| unavailable(e.to_string()))?;
            let resp = client
                .get(r.as_str())
                .send()
                .and_then(|r| r.error_for_status())
                .map_err(|e| unavailable(e.to_string()))?;
            Ok(resp.bytes().map_err(|e| unavailable(e.to_string()))?.to_vec())
        } else {
            fs::read(self.resolve_path(r)).map_err(|e| unavailable(e.to_string()))
        }
    }

    pub fn load(&self, r: &ImageRef) -> Result<Arc<LoadedImage>, ImageError> {
        if let Some(img) = self.loaded.lock().unwrap().get(r) {
            return Ok(img.clone());
        }
        let bytes = self.fetch(r)?;
        let (width, height, canonical) =
            canonical_bytes(&bytes).map_err(|e| ImageError::Decode(r.to_string(), e.to_string()))?;
        let img = Arc::new(LoadedImage {
            reference: r.clone(),
            mime: mime_of(&bytes),
            bytes,
            width,
            height,
            digest: Sha256::digest(&canonical).into(),
        });
        self.loaded.lock().unwrap().insert(r.clone(), img.clone());
        Ok(img)
    }

    pub fn is_readable(&self, r: &ImageRef) -> bool {
        match self.load(r) {
            Ok(_) => true,
            Err(e) => {
                log::debug!("{e}");
                false
            }
        }
    }
}
