//! Portable pixmap / graymap I/O (binary P6 / P5).

use super::scene::Image;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P6\n{} {}\n255\n", image.width, image.height);
    file.write_all(header.as_bytes())
        .and_then(|()| file.write_all(&image.rgb))
        .map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::contract(format!("{} is not a binary PPM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let width: usize = fields[1].parse().map_err(|_| bad())?;
    let height: usize = fields[2].parse().map_err(|_| bad())?;
    pos += 1; // single whitespace after maxval
    let expected = width * height * 3;
    if bytes.len() < pos + expected {
        return Err(bad());
    }
    Ok(Image {
        width,
        height,
        rgb: bytes[pos..pos + expected].to_vec(),
    })
}

/// Grayscale map, values pre-scaled to [0, 255].
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::contract(format!(
            "pgm: {} values for {}x{}",
            gray.len(),
            width,
            height
        )));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P5\n{width} {height}\n255\n");
    file.write_all(header.as_bytes())
        .and_then(|()| file.write_all(gray))
        .map_err(|e| Error::io(path, e))
}
