//! Image container, file codecs (8-bit PNG and the lossless PSID float
//! format) and patch cropping.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Dense `h × w × c` array, row-major with the channel index fastest.
///
/// Pixel intensities are nominally in `[0, 1]`; noisy data may leave that
/// range. The same container doubles as a network feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T = f32> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

/// Feature maps share the image layout; only the channel count differs.
pub type FeatureMap<T> = ImageTensor<T>;

impl<T: Real> ImageTensor<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: T) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(shape_err!(
                "{}x{}x{} tensor needs {} values, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            ));
        }
        Ok(Self { h, w, c, data })
    }

    /// Builds a tensor from a per-element function of `(row, col, channel)`.
    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    #[inline]
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }
    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[self.idx(y, x, ch)]
    }
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: T) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }
    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.c]
    }

    pub fn same_dims<U>(&self, other: &ImageTensor<U>) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Square crop of side `size` with top-left corner at `(oy, ox)`.
    pub fn crop(&self, oy: usize, ox: usize, size: usize) -> Result<Self> {
        if oy + size > self.h || ox + size > self.w {
            return Err(shape_err!(
                "crop {}x{} at ({}, {}) exceeds {}x{} image",
                size,
                size,
                oy,
                ox,
                self.h,
                self.w
            ));
        }
        let c = self.c;
        let mut data = Vec::with_capacity(size * size * c);
        for y in oy..oy + size {
            let start = self.idx(y, ox, 0);
            data.extend_from_slice(&self.data[start..start + size * c]);
        }
        Ok(Self {
            h: size,
            w: size,
            c,
            data,
        })
    }
}

/// Crops a `size × size` patch at a uniformly drawn even offset, so that the
/// patch's 2×2 block grid coincides with the source image's grid.
pub fn crop_patch<T: Real>(
    img: &ImageTensor<T>,
    size: usize,
    rng: &mut Rng,
) -> Result<ImageTensor<T>> {
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} must be even and positive"
        )));
    }
    if size > img.h() || size > img.w() {
        return Err(shape_err!(
            "patch size {} exceeds image extent {}x{}",
            size,
            img.h(),
            img.w()
        ));
    }
    let oy = 2 * rng.below((img.h() - size) / 2 + 1);
    let ox = 2 * rng.below((img.w() - size) / 2 + 1);
    img.crop(oy, ox, size)
}

const PSID_MAGIC: &[u8; 4] = b"PSID";
const PNG_MAGIC: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// Serializes a tensor in the PSID raw layout: `"PSID"`, little-endian `u32`
/// `h`, `w`, `c`, then `h·w·c` little-endian IEEE-754 `f32` values.
pub fn encode_psid(img: &ImageTensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.data.len());
    out.extend_from_slice(PSID_MAGIC);
    for d in [img.h, img.w, img.c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_psid(bytes: &[u8]) -> std::result::Result<ImageTensor<f32>, String> {
    if bytes.len() < 16 || &bytes[..4] != PSID_MAGIC {
        return Err("missing PSID header".into());
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or("PSID dimensions overflow")?;
    let body = &bytes[16..];
    if body.len() != n * 4 {
        return Err(format!(
            "PSID header declares {h}x{w}x{c} ({n} floats) but payload holds {} bytes",
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ImageTensor { h, w, c, data })
}

fn decode_png(bytes: &[u8]) -> std::result::Result<ImageTensor<f32>, String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("PNG frame too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!(
            "unsupported PNG bit depth {:?} (only 8-bit)",
            info.bit_depth
        ));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(format!(
                "unsupported PNG color type {other:?} (only gray or RGB)"
            ))
        }
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * c);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend(row[..w * c].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(ImageTensor { h, w, c, data })
}

/// Round-half-up 8-bit quantization of a clamped intensity.
#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v as f64 * 255.0 + 0.5).floor() as u8
}

pub fn encode_png(img: &ImageTensor<f32>) -> std::result::Result<Vec<u8>, String> {
    let color = match img.c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(format!("PNG export needs 1 or 3 channels, tensor has {c}")),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.w as u32, img.h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

/// Loads an 8-bit gray/RGB PNG (mapped to `[0,1]` by `v/255`) or a PSID
/// float file. The format is detected from the file's magic bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let decoded = if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes)
    } else if bytes.starts_with(PSID_MAGIC) {
        decode_psid(&bytes)
    } else {
        Err("unrecognized format (expected PNG or PSID)".into())
    };
    decoded.map_err(|reason| Error::Decode {
        path: path.to_owned(),
        reason,
    })
}

/// Writes `.psid` files losslessly and anything else as 8-bit PNG.
pub fn save_image(img: &ImageTensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_psid = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("psid"));
    let bytes = if is_psid {
        encode_psid(img)
    } else {
        encode_png(img).map_err(|reason| Error::Encode {
            path: path.to_owned(),
            reason,
        })?
    };
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}
