//! PNG codecs for tiles and label maps, plus atomic file writes.
//!
//! Instance maps are 16-bit grayscale, class maps 8-bit grayscale, tiles
//! 8-bit RGB. Anything else is rejected at load time.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::label_maps::{ClassMap, InstanceMap};
use crate::raster::{Raster, RgbImage};

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn encode(path: &Path, img: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

fn layout_error(path: &Path, expected: &'static str, img: &DynamicImage) -> Error {
    Error::PngFormat {
        path: path.to_path_buf(),
        expected,
        found: format!("{:?}", img.color()),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    match decode(path)? {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.pixels().map(|p| p.0).collect();
            Raster::from_vec(w as usize, h as usize, data)
        }
        other => Err(layout_error(path, "8-bit RGB", &other)),
    }
}

pub fn encode_rgb(path: &Path, img: &RgbImage) -> Result<Vec<u8>> {
    let (w, h) = img.dims();
    let raw: Vec<u8> = img.as_slice().iter().flatten().copied().collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length matches dimensions");
    encode(path, DynamicImage::ImageRgb8(buf))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_rgb(path, img)?)
}

pub fn read_instances(path: &Path) -> Result<InstanceMap> {
    match decode(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(u32::from).collect();
            InstanceMap::from_vec(w as usize, h as usize, data)
        }
        other => Err(layout_error(path, "16-bit grayscale", &other)),
    }
}

pub fn encode_instances(path: &Path, m: &InstanceMap) -> Result<Vec<u8>> {
    let (w, h) = m.dims();
    let raw = m
        .ids_slice()
        .iter()
        .map(|&v| {
            u16::try_from(v).map_err(|_| Error::Range {
                what: "instance id (16-bit PNG)",
                value: v as u64,
            })
        })
        .collect::<Result<Vec<u16>>>()?;
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length matches dimensions");
    encode(path, DynamicImage::ImageLuma16(buf))
}

pub fn write_instances(path: &Path, m: &InstanceMap) -> Result<()> {
    write_atomic(path, &encode_instances(path, m)?)
}

pub fn read_classes(path: &Path) -> Result<ClassMap> {
    match decode(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            ClassMap::from_vec(w as usize, h as usize, buf.into_raw())
        }
        other => Err(layout_error(path, "8-bit grayscale", &other)),
    }
}

pub fn encode_classes(path: &Path, m: &ClassMap) -> Result<Vec<u8>> {
    let (w, h) = m.dims();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, m.classes_slice().to_vec())
            .expect("buffer length matches dimensions");
    encode(path, DynamicImage::ImageLuma8(buf))
}

pub fn write_classes(path: &Path, m: &ClassMap) -> Result<()> {
    write_atomic(path, &encode_classes(path, m)?)
}
