//! Frame sequences on disk: 8-bit PNG, PFM and Radiance RGBE.
//!
//! A sequence is a directory of files named by a printf-style pattern such as
//! `frame_%06d`, with the extension implied by the format.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exposure::{HdrFrame, SdrFrame};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Png8,
    Pfm,
    Hdr,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Png8 => "png",
            FrameFormat::Pfm => "pfm",
            FrameFormat::Hdr => "hdr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "png" | "png8" => Ok(FrameFormat::Png8),
            "pfm" => Ok(FrameFormat::Pfm),
            "hdr" | "rgbe" => Ok(FrameFormat::Hdr),
            other => Err(Error::InvalidConfig(format!(
                "unknown frame format '{other}'"
            ))),
        }
    }
}

/// Parsed `prefix%0Nd suffix` filename pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePattern {
    prefix: String,
    width: usize,
    suffix: String,
}

impl FramePattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidConfig(format!(
                "frame pattern '{pattern}' needs exactly one %d or %0Nd"
            ))
        };
        let start = pattern.find('%').ok_or_else(bad)?;
        let rest = &pattern[start + 1..];
        let end = rest.find('d').ok_or_else(bad)?;
        let spec = &rest[..end];
        let width = if spec.is_empty() {
            0
        } else if let Some(digits) = spec.strip_prefix('0') {
            digits.parse().map_err(|_| bad())?
        } else {
            return Err(bad());
        };
        let suffix = &rest[end + 1..];
        if suffix.contains('%')
            || pattern[..start].contains(['/', '\\'])
            || suffix.contains(['/', '\\'])
        {
            return Err(bad());
        }
        Ok(Self {
            prefix: pattern[..start].to_string(),
            width,
            suffix: suffix.to_string(),
        })
    }

    pub fn file_stem(&self, index: u64) -> String {
        format!(
            "{}{:0width$}{}",
            self.prefix,
            index,
            self.suffix,
            width = self.width
        )
    }

    /// Index encoded in `stem`, if it matches.
    pub fn match_stem(&self, stem: &str) -> Option<u64> {
        let digits = stem
            .strip_prefix(&self.prefix)?
            .strip_suffix(&self.suffix)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if self.width > 0 && digits.len() != self.width {
            return None;
        }
        digits.parse().ok()
    }
}

/// Where and how a frame sequence is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequenceSpec {
    pub dir: PathBuf,
    pub pattern: FramePattern,
    pub format: FrameFormat,
    pub fps: f64,
}

impl FrameSequenceSpec {
    pub fn new(
        dir: impl Into<PathBuf>,
        pattern: &str,
        format: FrameFormat,
        fps: f64,
    ) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fps must be positive, got {fps}"
            )));
        }
        Ok(Self {
            dir: dir.into(),
            pattern: FramePattern::parse(pattern)?,
            format,
            fps,
        })
    }

    pub fn path(&self, index: u64) -> PathBuf {
        self.dir.join(format!(
            "{}.{}",
            self.pattern.file_stem(index),
            self.format.extension()
        ))
    }

    /// Paths of all frames, ordered by index; indices must be contiguous.
    pub fn list(&self) -> Result<Vec<PathBuf>> {
        let entries = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut indices = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let path = entry.path();
            let ext_ok = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case(self.format.extension()));
            if !ext_ok {
                continue;
            }
            if let Some(i) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| self.pattern.match_stem(s))
            {
                indices.push(i);
            }
        }
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no .{} frames matching the pattern in {}",
                self.format.extension(),
                self.dir.display()
            )));
        }
        for (expected, &found) in (indices[0]..).zip(&indices) {
            if found != expected {
                return Err(Error::SequenceGap {
                    dir: self.dir.clone(),
                    index: expected,
                });
            }
        }
        Ok(indices.iter().map(|&i| self.path(i)).collect())
    }
}

pub fn read_png(path: &Path) -> Result<SdrFrame> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, 0, format!("PNG header: {e}")))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::Unsupported(format!(
            "{}: 16-bit PNG; only 8-bit frames are supported",
            path.display()
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, 0, "PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, 0, format!("PNG data: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => bytes
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        png::ColorType::Indexed => {
            return Err(Error::Unsupported(format!(
                "{}: unexpanded palette PNG",
                path.display()
            )))
        }
    };
    SdrFrame::from_bytes(w, h, &rgb)
}

/// Writes an 8-bit RGB PNG without alpha.
pub fn write_png(frame: &SdrFrame, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        frame.width() as u32,
        frame.height() as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_image_data(&frame.to_bytes())
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .finish()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Reads every frame of an 8-bit PNG sequence; returns the frames and fps.
pub fn read_sdr_sequence(spec: &FrameSequenceSpec) -> Result<(Vec<SdrFrame>, f64)> {
    if spec.format != FrameFormat::Png8 {
        return Err(Error::InvalidConfig("SDR sequences must be PNG".into()));
    }
    let frames = spec
        .list()?
        .iter()
        .map(|p| read_png(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(f) = frames
        .iter()
        .find(|f| f.width() != frames[0].width() || f.height() != frames[0].height())
    {
        return Err(Error::InvalidInput(format!(
            "frame size {}x{} differs from the first frame's {}x{}",
            f.width(),
            f.height(),
            frames[0].width(),
            frames[0].height()
        )));
    }
    Ok((frames, spec.fps))
}

pub fn write_sdr_sequence(frames: &[SdrFrame], spec: &FrameSequenceSpec) -> Result<()> {
    fs::create_dir_all(&spec.dir).map_err(|e| Error::io(&spec.dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_png(f, &spec.path(i as u64))?;
    }
    Ok(())
}

/// Decoded HDR file plus the number of negative samples clamped to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedHdr {
    pub frame: HdrFrame,
    pub negatives_clamped: usize,
}

/// Little-endian PFM, rows bottom to top.
pub fn encode_pfm(frame: &HdrFrame) -> Vec<u8> {
    let (w, h) = (frame.width(), frame.height());
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 12);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                out.extend_from_slice(&(frame.image.get(c, y, x) as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Splits the next whitespace-delimited header token.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(path, start as u64, "truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::format(path, start as u64, "non-ASCII header"))
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<DecodedHdr> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos, path)?;
    match magic {
        "PF" => {}
        "Pf" => return Err(Error::Unsupported("greyscale PFM".into())),
        _ => return Err(Error::format(path, 0, format!("bad PFM magic '{magic}'"))),
    }
    let mut dim = |what: &str| -> Result<usize> {
        let at = pos;
        let tok = header_token(bytes, &mut pos, path)?;
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(path, at as u64, format!("bad {what} '{tok}'")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let scale_at = pos;
    let scale_tok = header_token(bytes, &mut pos, path)?;
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::format(path, scale_at as u64, format!("bad scale '{scale_tok}'")))?;
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(
            path,
            pos as u64,
            "missing newline after PFM header",
        ));
    }
    pos += 1;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| Error::format(path, 0, "PFM dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated PFM raster: {} of {expected} bytes", data.len()),
        ));
    }
    if data.len() > expected {
        return Err(Error::format(
            path,
            (pos + expected) as u64,
            "trailing bytes after PFM raster",
        ));
    }
    let big_endian = scale > 0.0;
    let mut img = Image::filled(w, h, 0.0);
    let mut negatives = 0;
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if big_endian {
            f32::from_be_bytes(raw)
        } else {
            f32::from_le_bytes(raw)
        };
        if !v.is_finite() {
            return Err(Error::format(
                path,
                (pos + 4 * i) as u64,
                "non-finite sample",
            ));
        }
        let mut v = f64::from(v);
        if v < 0.0 {
            negatives += 1;
            v = 0.0;
        }
        let c = i % 3;
        let px = i / 3;
        let (x, row) = (px % w, px / w);
        img.set(c, h - 1 - row, x, v);
    }
    Ok(DecodedHdr {
        frame: HdrFrame::new(img)?,
        negatives_clamped: negatives,
    })
}

/// Shared-exponent encoding of one RGB triple.
pub fn rgbe_encode(rgb: [f64; 3]) -> [u8; 4] {
    let v = rgb[0].max(rgb[1]).max(rgb[2]);
    if !(v >= 1e-32) {
        return [0, 0, 0, 0];
    }
    let (mantissa, exp) = frexp(v);
    let scale = mantissa * 256.0 / v;
    let byte = |c: f64| (c.max(0.0) * scale).floor().min(255.0) as u8;
    [
        byte(rgb[0]),
        byte(rgb[1]),
        byte(rgb[2]),
        (exp + 128).clamp(0, 255) as u8,
    ]
}

pub fn rgbe_decode(px: [u8; 4]) -> [f64; 3] {
    if px[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(i32::from(px[3]) - (128 + 8));
    [
        f64::from(px[0]) * f,
        f64::from(px[1]) * f,
        f64::from(px[2]) * f,
    ]
}

/// `v = m * 2^e` with `m` in `[0.5, 1)`; `v` must be positive and finite.
fn frexp(v: f64) -> (f64, i32) {
    let mut e = v.log2().floor() as i32 + 1;
    let mut m = v / 2f64.powi(e);
    while m >= 1.0 {
        m /= 2.0;
        e += 1;
    }
    while m < 0.5 {
        m *= 2.0;
        e -= 1;
    }
    (m, e)
}

const RLE_MIN_WIDTH: usize = 8;
const RLE_MAX_WIDTH: usize = 0x7fff;

/// Radiance RGBE with a `-Y h +X w` raster; new-style RLE where the width allows it.
pub fn encode_rgbe(frame: &HdrFrame) -> Vec<u8> {
    let (w, h) = (frame.width(), frame.height());
    let mut out = format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n").into_bytes();
    let mut scanline = vec![[0u8; 4]; w];
    for y in 0..h {
        for (x, px) in scanline.iter_mut().enumerate() {
            *px = rgbe_encode([
                frame.image.get(0, y, x),
                frame.image.get(1, y, x),
                frame.image.get(2, y, x),
            ]);
        }
        if (RLE_MIN_WIDTH..=RLE_MAX_WIDTH).contains(&w) {
            out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
            for c in 0..4 {
                let comp: Vec<u8> = scanline.iter().map(|p| p[c]).collect();
                rle_component(&comp, &mut out);
            }
        } else {
            scanline.iter().for_each(|p| out.extend_from_slice(p));
        }
    }
    out
}

/// Runs of at least four equal bytes become run packets, the rest literals.
fn rle_component(data: &[u8], out: &mut Vec<u8>) {
    const MIN_RUN: usize = 4;
    let mut i = 0;
    while i < data.len() {
        // Find the next run of MIN_RUN or more.
        let mut run_start = i;
        let mut run_len = 0;
        while run_start < data.len() {
            run_len = 1;
            while run_start + run_len < data.len()
                && run_len < 127
                && data[run_start + run_len] == data[run_start]
            {
                run_len += 1;
            }
            if run_len >= MIN_RUN {
                break;
            }
            run_start += run_len;
        }
        if run_start >= data.len() {
            run_start = data.len();
            run_len = 0;
        }
        while i < run_start {
            let n = (run_start - i).min(128);
            out.push(n as u8);
            out.extend_from_slice(&data[i..i + n]);
            i += n;
        }
        if run_len >= MIN_RUN {
            out.push(128 + run_len as u8);
            out.push(data[run_start]);
            i = run_start + run_len;
        }
    }
}

pub fn decode_rgbe(bytes: &[u8], path: &Path) -> Result<HdrFrame> {
    let mut pos = 0;
    let line = |pos: &mut usize| -> Result<(usize, &str)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| Error::format(path, start as u64, "truncated header"))?;
        *pos = end + 1;
        let text = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| Error::format(path, start as u64, "non-ASCII header line"))?;
        Ok((start, text.trim_end_matches('\r')))
    };
    let (_, first) = line(&mut pos)?;
    if first != "#?RADIANCE" && first != "#?RGBE" {
        return Err(Error::format(path, 0, "missing #?RADIANCE signature"));
    }
    loop {
        let (at, text) = line(&mut pos)?;
        if text.is_empty() {
            break;
        }
        if let Some(fmt) = text.strip_prefix("FORMAT=") {
            if fmt != "32-bit_rle_rgbe" {
                return Err(Error::Unsupported(format!(
                    "Radiance pixel format '{fmt}' at byte {at}"
                )));
            }
        }
    }
    let (res_at, res) = line(&mut pos)?;
    let toks: Vec<&str> = res.split_whitespace().collect();
    if toks.len() != 4 {
        return Err(Error::format(
            path,
            res_at as u64,
            format!("bad resolution line '{res}'"),
        ));
    }
    if toks[0] != "-Y" || toks[2] != "+X" {
        return Err(Error::Unsupported(format!(
            "raster orientation '{} {}' in {}; only '-Y h +X w' is supported",
            toks[0],
            toks[2],
            path.display()
        )));
    }
    let parse = |t: &str| {
        t.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(path, res_at as u64, format!("bad dimension '{t}'")))
    };
    let (h, w) = (parse(toks[1])?, parse(toks[3])?);

    let mut img = Image::filled(w, h, 0.0);
    let truncated = |at: usize| Error::format(path, at as u64, "truncated scanline data");
    let mut scan = vec![[0u8; 4]; w];
    for y in 0..h {
        let rle = (RLE_MIN_WIDTH..=RLE_MAX_WIDTH).contains(&w)
            && bytes.len() >= pos + 4
            && bytes[pos] == 2
            && bytes[pos + 1] == 2
            && bytes[pos + 2] & 0x80 == 0;
        if rle {
            let declared = (usize::from(bytes[pos + 2]) << 8) | usize::from(bytes[pos + 3]);
            if declared != w {
                return Err(Error::format(
                    path,
                    pos as u64,
                    format!("scanline width {declared}, expected {w}"),
                ));
            }
            pos += 4;
            for c in 0..4 {
                let mut x = 0;
                while x < w {
                    let count = *bytes.get(pos).ok_or_else(|| truncated(pos))? as usize;
                    pos += 1;
                    if count > 128 {
                        let n = count - 128;
                        let v = *bytes.get(pos).ok_or_else(|| truncated(pos))?;
                        pos += 1;
                        if x + n > w {
                            return Err(Error::format(path, pos as u64, "run overflows scanline"));
                        }
                        scan[x..x + n].iter_mut().for_each(|p| p[c] = v);
                        x += n;
                    } else {
                        if count == 0 || x + count > w {
                            return Err(Error::format(path, pos as u64, "bad literal count"));
                        }
                        let src = bytes.get(pos..pos + count).ok_or_else(|| truncated(pos))?;
                        for (p, &v) in scan[x..x + count].iter_mut().zip(src) {
                            p[c] = v;
                        }
                        pos += count;
                        x += count;
                    }
                }
            }
        } else {
            let src = bytes.get(pos..pos + 4 * w).ok_or_else(|| truncated(pos))?;
            for (p, chunk) in scan.iter_mut().zip(src.chunks_exact(4)) {
                *p = chunk.try_into().unwrap();
            }
            pos += 4 * w;
        }
        for (x, p) in scan.iter().enumerate() {
            let rgb = rgbe_decode(*p);
            for (c, v) in rgb.into_iter().enumerate() {
                img.set(c, y, x, v);
            }
        }
    }
    if pos != bytes.len() {
        return Err(Error::format(
            path,
            pos as u64,
            "trailing bytes after RGBE raster",
        ));
    }
    HdrFrame::new(img)
}

pub fn write_hdr_frame(frame: &HdrFrame, path: &Path, format: FrameFormat) -> Result<()> {
    let bytes = match format {
        FrameFormat::Pfm => encode_pfm(frame),
        FrameFormat::Hdr => encode_rgbe(frame),
        FrameFormat::Png8 => {
            return Err(Error::InvalidConfig(
                "HDR frames cannot be written as PNG".into(),
            ))
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_hdr_frame(path: &Path, format: FrameFormat) -> Result<DecodedHdr> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        FrameFormat::Pfm => decode_pfm(&bytes, path),
        FrameFormat::Hdr => Ok(DecodedHdr {
            frame: decode_rgbe(&bytes, path)?,
            negatives_clamped: 0,
        }),
        FrameFormat::Png8 => Err(Error::InvalidConfig("PNG is not an HDR format".into())),
    }
}

/// Frames of an HDR sequence plus the total count of clamped negative samples.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrSequence {
    pub frames: Vec<HdrFrame>,
    pub negatives_clamped: usize,
}

pub fn read_hdr_sequence(spec: &FrameSequenceSpec) -> Result<HdrSequence> {
    let mut frames = Vec::new();
    let mut negatives = 0;
    for path in spec.list()? {
        let decoded = read_hdr_frame(&path, spec.format)?;
        negatives += decoded.negatives_clamped;
        frames.push(decoded.frame);
    }
    if negatives > 0 {
        log::warn!(
            "clamped {negatives} negative samples to zero in {}",
            spec.dir.display()
        );
    }
    Ok(HdrSequence {
        frames,
        negatives_clamped: negatives,
    })
}

pub fn write_hdr_sequence(frames: &[HdrFrame], spec: &FrameSequenceSpec) -> Result<()> {
    fs::create_dir_all(&spec.dir).map_err(|e| Error::io(&spec.dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_hdr_frame(f, &spec.path(i as u64), spec.format)?;
    }
    Ok(())
}

/// Per-frame exposure values as `frame,exposure` CSV.
pub fn format_exposure_sidecar(exposures: &[f64]) -> String {
    let mut out = String::from("frame,exposure\n");
    for (i, f) in exposures.iter().enumerate() {
        out.push_str(&format!("{i},{f:.17e}\n"));
    }
    out
}

pub fn parse_exposure_sidecar(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len();
        let line = line.trim();
        if n == 0 && line == "frame,exposure" || line.is_empty() {
            continue;
        }
        let bad = || Error::format(path, at as u64, format!("bad sidecar line '{line}'"));
        let (index, value) = line.split_once(',').ok_or_else(bad)?;
        if index.trim().parse::<usize>().ok() != Some(values.len()) {
            return Err(bad());
        }
        let v: f64 = value.trim().parse().map_err(|_| bad())?;
        if !v.is_finite() {
            return Err(bad());
        }
        values.push(v);
    }
    Ok(values)
}

pub fn read_exposure_sidecar(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_exposure_sidecar(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize) -> HdrFrame {
        HdrFrame::new(Image::from_fn(w, h, |c, y, x| {
            (c + 1) as f64 * 0.25 + y as f64 * 1.5 + x as f64 * 0.125
        }))
        .unwrap()
    }

    #[test]
    fn pattern_parsing() {
        let p = FramePattern::parse("frame_%06d").unwrap();
        assert_eq!(p.file_stem(12), "frame_000012");
        assert_eq!(p.match_stem("frame_000012"), Some(12));
        assert_eq!(p.match_stem("frame_12"), None);
        assert_eq!(p.match_stem("other_000012"), None);
        let p = FramePattern::parse("%d_hdr").unwrap();
        assert_eq!(p.file_stem(7), "7_hdr");
        assert_eq!(p.match_stem("123_hdr"), Some(123));
        assert!(FramePattern::parse("frame").is_err());
        assert!(FramePattern::parse("a%5d").is_err());
        assert!(FramePattern::parse("a%d%d").is_err());
    }

    #[test]
    fn pfm_round_trip_exact_for_f32_values() {
        let f = frame(5, 3);
        let back = decode_pfm(&encode_pfm(&f), Path::new("t")).unwrap();
        assert_eq!(back.frame, f);
        assert_eq!(back.negatives_clamped, 0);
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let f = frame(1, 2);
        let bytes = encode_pfm(&f);
        let header = b"PF\n1 2\n-1.0\n".len();
        let first = f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap());
        assert_eq!(f64::from(first), f.image.get(0, 1, 0));
    }

    #[test]
    fn pfm_big_endian_fixture() {
        // 2x2 big-endian, rows bottom-up.
        let mut bytes = b"PF\n2 2\n1.0\n".to_vec();
        let values: [f32; 12] = [
            1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, 0.25, 0.125, 7.0, 8.0, 9.0,
        ];
        for v in values {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let f = decode_pfm(&bytes, Path::new("be")).unwrap().frame;
        // Bottom row (y = 1) comes first in the file.
        assert_eq!(
            [
                f.image.get(0, 1, 0),
                f.image.get(1, 1, 0),
                f.image.get(2, 1, 0)
            ],
            [1.0, 2.0, 3.0]
        );
        assert_eq!(
            [
                f.image.get(0, 1, 1),
                f.image.get(1, 1, 1),
                f.image.get(2, 1, 1)
            ],
            [4.0, 5.0, 6.0]
        );
        assert_eq!(
            [
                f.image.get(0, 0, 0),
                f.image.get(1, 0, 0),
                f.image.get(2, 0, 0)
            ],
            [0.5, 0.25, 0.125]
        );
        assert_eq!(
            [
                f.image.get(0, 0, 1),
                f.image.get(1, 0, 1),
                f.image.get(2, 0, 1)
            ],
            [7.0, 8.0, 9.0]
        );
    }

    #[test]
    fn pfm_negative_clamped_and_counted() {
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        for v in [-1.0f32, 0.5, -0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let d = decode_pfm(&bytes, Path::new("n")).unwrap();
        assert_eq!(d.negatives_clamped, 1);
        assert_eq!(d.frame.image.data(), &[0.0, 0.5, 0.0]);
    }

    #[test]
    fn pfm_rejects_truncated_and_trailing() {
        let bytes = encode_pfm(&frame(3, 2));
        match decode_pfm(&bytes[..bytes.len() - 1], Path::new("t")) {
            Err(Error::Format { .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.extend_from_slice(b"xx");
        match decode_pfm(&long, Path::new("t")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len()),
            other => panic!("{other:?}"),
        }
        assert!(decode_pfm(b"P6\n1 1\n255\n", Path::new("t")).is_err());
        assert!(decode_pfm(b"PF\n0 1\n-1.0\n", Path::new("t")).is_err());
    }

    #[test]
    fn rgbe_unit_value() {
        let px = rgbe_encode([1.0, 1.0, 1.0]);
        assert_eq!(px, [128, 128, 128, 129]);
        assert_eq!(rgbe_decode(px), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn rgbe_zero_convention() {
        assert_eq!(rgbe_encode([0.0, 0.0, 0.0]), [0, 0, 0, 0]);
        assert_eq!(rgbe_decode([0, 0, 0, 0]), [0.0; 3]);
        let black = HdrFrame::new(Image::filled(9, 2, 0.0)).unwrap();
        let back = decode_rgbe(&encode_rgbe(&black), Path::new("z")).unwrap();
        assert!(back.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rgbe_log_scan() {
        for i in -200..=200 {
            let v = 2f64.powf(f64::from(i) / 10.0);
            let back = rgbe_decode(rgbe_encode([v, v, v]));
            assert!((back[0] - v).abs() / v < 0.01, "{v} -> {}", back[0]);
        }
    }

    #[test]
    fn rgbe_round_trip_rle_and_flat() {
        for (w, h) in [(16, 3), (5, 2), (40, 1)] {
            let f = frame(w, h);
            let bytes = encode_rgbe(&f);
            let back = decode_rgbe(&bytes, Path::new("r")).unwrap();
            for (a, b) in back.image.data().iter().zip(f.image.data()) {
                assert!(
                    (a - b).abs() <= 0.01 * b.max(1e-3) + 0.02 * 0.25,
                    "{a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn rle_packets() {
        let mut out = Vec::new();
        rle_component(&[5, 5, 5, 5, 5, 1, 2, 3, 3, 3], &mut out);
        assert_eq!(out, vec![133, 5, 5, 1, 2, 3, 3, 3]);
        let long = vec![9u8; 300];
        let mut out = Vec::new();
        rle_component(&long, &mut out);
        assert_eq!(out, vec![255, 9, 255, 9, 128 + 46, 9]);
    }

    #[test]
    fn rgbe_header_bytes() {
        let bytes = encode_rgbe(&frame(8, 2));
        assert!(bytes.starts_with(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 2 +X 8\n"));
    }

    #[test]
    fn rgbe_rejects_orientation_and_garbage() {
        let bad = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n+Y 1 +X 1\n\x80\x80\x80\x81";
        match decode_rgbe(bad, Path::new("o")) {
            Err(Error::Unsupported(msg)) => assert!(msg.contains("orientation")),
            other => panic!("{other:?}"),
        }
        let mut bytes = encode_rgbe(&frame(3, 1));
        bytes.push(0);
        assert!(matches!(
            decode_rgbe(&bytes, Path::new("g")),
            Err(Error::Format { .. })
        ));
        let bytes = encode_rgbe(&frame(12, 2));
        assert!(matches!(
            decode_rgbe(&bytes[..bytes.len() - 2], Path::new("t")),
            Err(Error::Format { .. })
        ));
        assert!(decode_rgbe(b"P6\n", Path::new("m")).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let values = [0.0, -1.25, 3.0e-7, -2.000000000000001];
        let text = format_exposure_sidecar(&values);
        assert_eq!(
            parse_exposure_sidecar(&text, Path::new("s")).unwrap(),
            values
        );
        assert!(parse_exposure_sidecar("frame,exposure\n1,0.5\n", Path::new("s")).is_err());
        assert!(parse_exposure_sidecar("frame,exposure\n0,nan\n", Path::new("s")).is_err());
    }

    #[test]
    fn encoders_are_byte_stable() {
        let f = frame(9, 4);
        assert_eq!(encode_pfm(&f), encode_pfm(&f));
        assert_eq!(encode_rgbe(&f), encode_rgbe(&f));
    }
}
