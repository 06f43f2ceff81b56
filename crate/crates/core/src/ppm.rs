//! Binary PPM (P6, maxval 255) frames and numbered clip directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::{ClipStream, Field, Frame, Parity, CHANNELS};

/// Planar `[3, h, w]` pixels in `[0, 1]`, as stored in frames and fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

pub fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize(pixels: &[f32]) -> Vec<f32> {
    pixels.iter().map(|&v| from_byte(to_byte(v))).collect()
}

pub fn encode(height: usize, width: usize, pixels: &[f32]) -> Vec<u8> {
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(plane * CHANNELS);
    for i in 0..plane {
        for c in 0..CHANNELS {
            out.push(to_byte(pixels[c * plane + i]));
        }
    }
    out
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    if header_token(bytes, &mut pos) != Some(b"P6") {
        return Err("not a binary PPM (missing P6 magic)".into());
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let tok = header_token(bytes, &mut pos).ok_or_else(|| format!("missing {what}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("invalid {what}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let plane = width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < plane * CHANNELS {
        return Err(format!("truncated raster: {} of {} bytes", raster.len(), plane * CHANNELS));
    }
    let mut pixels = vec![0.0; plane * CHANNELS];
    for i in 0..plane {
        for c in 0..CHANNELS {
            pixels[c * plane + i] = from_byte(raster[i * CHANNELS + c]);
        }
    }
    Ok(Image { height, width, pixels })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::data(path, m))
}

pub fn write_image(path: &Path, height: usize, width: usize, pixels: &[f32]) -> Result<()> {
    fs::write(path, encode(height, width, pixels)).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = read_image(path)?;
    if img.height % 2 != 0 {
        return Err(Error::data(path, format!("frame height {} is odd", img.height)));
    }
    Frame::new(img.height, img.width, img.pixels).map_err(|e| Error::data(path, e.to_string()))
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    write_image(path, frame.height(), frame.width(), frame.pixels())
}

pub fn read_field(path: &Path, parity: Parity) -> Result<Field> {
    let img = read_image(path)?;
    Field::new(parity, img.height, img.width, img.pixels).map_err(|e| Error::data(path, e.to_string()))
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    write_image(path, field.height(), field.width(), field.pixels())
}

/// File name of the `index`-th image of a clip directory.
pub fn numbered_name(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// `.ppm` files of a directory in lexicographic order.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn read_clip(dir: &Path) -> Result<Vec<Frame>> {
    let paths = list_ppm(dir)?;
    if paths.is_empty() {
        return Err(Error::data(dir, "no frames (no .ppm files found)"));
    }
    let frames: Vec<Frame> = paths.iter().map(|p| read_frame(p)).collect::<Result<_>>()?;
    let (h, w) = (frames[0].height(), frames[0].width());
    if let Some((p, f)) = paths.iter().zip(&frames).find(|(_, f)| (f.height(), f.width()) != (h, w)) {
        return Err(Error::data(p, format!("frame is {}x{}, first frame is {h}x{w}", f.height(), f.width())));
    }
    Ok(frames)
}

pub fn write_clip(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(numbered_name(i)), f)?;
    }
    Ok(())
}

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# file parity source_index";

/// Writes each field as a half-height PPM plus a manifest of parities and source indices.
pub fn write_stream(dir: &Path, stream: &ClipStream) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, f) in stream.fields().iter().enumerate() {
        let name = numbered_name(i);
        write_field(&dir.join(&name), &f.field)?;
        manifest.push_str(&format!("{name} {} {}\n", f.field.parity().tag(), f.source_index));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a field stream written by [`write_stream`].
pub fn read_stream(dir: &Path) -> Result<ClipStream> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut fields = Vec::new();
    let mut sources = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#')) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, tag, source] = parts[..] else {
            return Err(Error::data(&path, format!("line {}: expected `file parity source_index`", n + 1)));
        };
        let parity = Parity::from_tag(tag).map_err(|e| Error::data(&path, format!("line {}: {e}", n + 1)))?;
        let source: usize =
            source.parse().map_err(|_| Error::data(&path, format!("line {}: invalid source index `{source}`", n + 1)))?;
        fields.push(read_field(&dir.join(name), parity)?);
        sources.push(source);
    }
    if fields.is_empty() {
        return Err(Error::data(&path, "manifest lists no fields"));
    }
    let stream = ClipStream::from_fields(fields).map_err(|e| Error::data(&path, e.to_string()))?;
    if let Some((i, _)) = stream.fields().iter().zip(&sources).enumerate().find(|(_, (f, &s))| f.source_index != s) {
        return Err(Error::data(&path, format!("field {i}: source indices must be consecutive")));
    }
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_conversion_rounds_and_clamps() {
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(1.7), 255);
        assert_eq!(to_byte(-0.2), 0);
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let (h, w) = (3, 5);
        let px: Vec<f32> = (0..3 * h * w).map(|i| from_byte((i * 17 % 256) as u8)).collect();
        let img = decode(&encode(h, w, &px)).unwrap();
        assert_eq!((img.height, img.width), (h, w));
        assert_eq!(img.pixels, px);
    }

    #[test]
    fn stream_manifest_roundtrip() {
        let frames: Vec<Frame> = (0..4).map(|i| Frame::filled(4, 3, [i as f32 / 4.0, 0.5, 1.0]).unwrap()).collect();
        let stream = crate::field::synth_interlaced(&frames).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_stream(dir.path(), &stream).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(text.contains("000001.ppm E 1"));
        let back = read_stream(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in back.fields().iter().zip(stream.fields()) {
            assert_eq!((a.source_index, a.field.parity()), (b.source_index, b.field.parity()));
            assert_eq!(a.field.pixels(), quantize(b.field.pixels()));
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6\n# comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 128]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.pixels, vec![1.0, 0.0, 128.0 / 255.0]);
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P6\n1 1\n65535\n").is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00\x00").unwrap_err().contains("truncated"));
    }
}
