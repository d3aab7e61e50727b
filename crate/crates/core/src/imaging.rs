//! Image and mask I/O, mask application, raster augmentation, and
//! color-coded coordinate masks (CCM).
//!
//! Pixel coordinates follow raster convention: `x` is the column, `y` the
//! row, origin at the top-left corner.

use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use rand::Rng;

use crate::{Error, Result};

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::dim("rgb image", (width, height), data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn black(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Channel-major `[3, H, W]` floats scaled to `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }
}

/// Foreground (plant) mask aligned with an [`RgbImage`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskImage {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::dim("mask", (width, height), data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, fg: bool) {
        self.data[y * self.width + x] = fg;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Color-coded coordinate mask: R = encoded column, G = encoded row,
/// B = encoded mean intensity; background stays black.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CcmImage(RgbImage);

impl CcmImage {
    pub fn as_rgb(&self) -> &RgbImage {
        &self.0
    }

    pub fn into_rgb(self) -> RgbImage {
        self.0
    }

    /// Wraps a raster read back from disk.
    pub fn from_rgb(img: RgbImage) -> Self {
        Self(img)
    }
}

/// A foreground pixel recovered from a [`CcmImage`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcmPoint {
    pub x: usize,
    pub y: usize,
    pub intensity: f64,
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Raw decoded raster before interpretation as image or mask.
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn png_err(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("png: {other}")),
    }
}

fn decode_png(bytes: &[u8], allow_gray: bool) -> Result<Raster> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let (color, depth) = (reader.info().color_type, reader.info().bit_depth);
    if depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("unsupported PNG bit depth {depth:?}; expected 8")));
    }
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale if allow_gray => 1,
        other => return Err(Error::Format(format!("unsupported PNG color type {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let mut data = Vec::with_capacity(width * height * channels);
    for row in buf.chunks(stride).take(height) {
        data.extend_from_slice(&row[..width * channels]);
    }
    Ok(Raster { width, height, channels, data })
}

fn decode_pnm(bytes: &[u8], allow_gray: bool) -> Result<Raster> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(truncated()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed PNM header".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {maxval}; expected 255")));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" if allow_gray => 1,
        _ => return Err(Error::Format("unsupported PNM variant".into())),
    };
    let n = width * height * channels;
    if width == 0 || height == 0 {
        return Err(Error::Format("empty PNM raster".into()));
    }
    let data = bytes.get(pos..pos + n).ok_or_else(truncated)?.to_vec();
    Ok(Raster { width, height, channels, data })
}

fn truncated() -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated image file"))
}

fn decode(bytes: &[u8], allow_gray: bool) -> Result<Raster> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes, allow_gray)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(bytes, allow_gray)
    } else {
        Err(Error::Format("not a PNG or binary PPM file".into()))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::at_path(path))
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let r = decode(bytes, false)?;
    RgbImage::new(r.width, r.height, r.data)
}

/// Reads an 8-bit RGB PNG or a binary PPM (P6).
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_image(&read_bytes(path)?).map_err(|e| match e {
        Error::Io(source) => Error::Path { path: path.to_owned(), source },
        other => other,
    })
}

fn is_ppm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
        w.write_image_data(data).map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn encode_image(img: &RgbImage, as_ppm: bool) -> Result<Vec<u8>> {
    if as_ppm {
        let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
        out.extend_from_slice(&img.data);
        Ok(out)
    } else {
        encode_png(img.width, img.height, png::ColorType::Rgb, &img.data)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(Error::at_path(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(Error::at_path(path))
}

/// Writes PNG, or P6 when the extension is `.ppm`.
pub fn save_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &encode_image(img, is_ppm(path))?)
}

/// Reads a mask; any non-zero channel marks foreground. Accepts 8-bit RGB or
/// grayscale PNG, P6 or P5.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    let r = decode(&read_bytes(path.as_ref())?, true)?;
    let data = r.data.chunks_exact(r.channels).map(|px| px.iter().any(|&v| v != 0)).collect();
    MaskImage::new(r.width, r.height, data)
}

/// Writes a mask as 8-bit grayscale PNG (P5 for `.pgm`/`.ppm`), foreground 255.
pub fn save_mask(mask: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let bytes = if is_ppm(path) {
        let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
        out.extend_from_slice(&data);
        out
    } else {
        encode_png(mask.width, mask.height, png::ColorType::Grayscale, &data)?
    };
    write_file(path, &bytes)
}

/// Keeps foreground pixels and sets every background pixel to black.
pub fn apply_mask(img: &RgbImage, mask: &MaskImage) -> Result<RgbImage> {
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::dim("apply_mask", (img.width, img.height), (mask.width, mask.height)));
    }
    let mut out = img.clone();
    for (px, &fg) in out.data.chunks_exact_mut(3).zip(&mask.data) {
        if !fg {
            px.fill(0);
        }
    }
    Ok(out)
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(img.width - 1 - x, y, img.pixel(x, y));
        }
    }
    out
}

pub fn flip_vertical(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    let row = img.width * 3;
    for y in 0..img.height {
        let dst = (img.height - 1 - y) * row;
        out.data[dst..dst + row].copy_from_slice(&img.data[y * row..(y + 1) * row]);
    }
    out
}

/// Rotates 90° clockwise; width and height swap.
pub fn rotate90(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.height, img.width);
    let mut out = RgbImage::black(w, h);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(img.height - 1 - y, x, img.pixel(x, y));
        }
    }
    out
}

/// Random horizontal flip, vertical flip and 90° rotation, each applied with probability 1/2.
pub fn augment_image(img: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let mut out = img.clone();
    if rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if rng.random_bool(0.5) {
        out = flip_vertical(&out);
    }
    if rng.random_bool(0.5) {
        out = rotate90(&out);
    }
    out
}

/// Nearest-neighbour resampling.
pub fn resize_nearest(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if (img.width, img.height) == (width, height) {
        return img.clone();
    }
    let mut out = RgbImage::black(width, height);
    for y in 0..height {
        let sy = (y * img.height) / height;
        for x in 0..width {
            let sx = (x * img.width) / width;
            out.set_pixel(x, y, img.pixel(sx, sy));
        }
    }
    out
}

pub fn resize_mask_nearest(mask: &MaskImage, width: usize, height: usize) -> MaskImage {
    let mut out = MaskImage::empty(width, height);
    for y in 0..height {
        for x in 0..width {
            out.set(x, y, mask.get(x * mask.width / width, y * mask.height / height));
        }
    }
    out
}

/// `round(num / den)` with halves rounded up, for non-negative integers.
fn div_round(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Encodes a masked image as a color-coded coordinate mask.
///
/// Each non-black pixel at `(x, y)` becomes
/// `(round(x·255/(W−1)), round(y·255/(H−1)), round((R+G+B)/3))`, halves rounded up.
/// A foreground pixel that would encode to pure black (the origin pixel with
/// channel sum 1) gets `B′ = 1` so it stays distinguishable from background.
pub fn encode_ccm(masked: &RgbImage) -> Result<CcmImage> {
    let (w, h) = (masked.width, masked.height);
    if w < 2 || h < 2 {
        return Err(Error::Degenerate(format!("coordinate mask needs W, H >= 2, got {w}x{h}")));
    }
    let mut out = RgbImage::black(w, h);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = masked.pixel(x, y);
            if (r, g, b) == (0, 0, 0) {
                continue;
            }
            let rx = div_round(x * 255, w - 1) as u8;
            let gy = div_round(y * 255, h - 1) as u8;
            let mut bi = div_round(r as usize + g as usize + b as usize, 3) as u8;
            if (rx, gy, bi) == (0, 0, 0) {
                bi = 1;
            }
            out.set_pixel(x, y, [rx, gy, bi]);
        }
    }
    Ok(CcmImage(out))
}

/// Inverts [`encode_ccm`] for every non-black pixel, in row-major order.
///
/// Coordinates are exact when the original `width` and `height` are at most 256.
pub fn decode_ccm(ccm: &CcmImage, width: usize, height: usize) -> Vec<CcmPoint> {
    let img = &ccm.0;
    let scale = |v: u8, extent: usize| if extent < 2 { 0 } else { div_round(v as usize * (extent - 1), 255) };
    img.pixels()
        .filter(|px| *px != [0, 0, 0])
        .map(|[r, g, b]| CcmPoint { x: scale(r, width), y: scale(g, height), intensity: b as f64 })
        .collect()
}
