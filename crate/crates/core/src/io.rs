//! Image and kernel file I/O.
//!
//! PNG (8- and 16-bit grayscale or RGB) is handled through the `image`
//! crate; binary PGM/PPM are parsed directly so 16-bit mosaics round-trip
//! without surprises. Loaded samples are scaled by the file's maxval into
//! `[0, 1]`; saving quantizes with round-half-away-from-zero.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{BayerMosaic, BlurKernel, CfaLayout, RasterImage};

/// Loads a PNG, PGM or PPM file, chosen by extension.
pub fn load_image(path: &Path) -> Result<RasterImage> {
    match extension(path)?.as_str() {
        "png" => load_png(path),
        "pgm" | "ppm" => load_pnm(path),
        other => Err(Error::UnsupportedLayout {
            path: path.to_path_buf(),
            detail: format!("unknown image extension {other:?}"),
        }),
    }
}

/// Saves to PNG, PGM or PPM, chosen by extension. `bit_depth` is 8 or 16.
pub fn save_image(path: &Path, img: &RasterImage, bit_depth: u32) -> Result<()> {
    if bit_depth != 8 && bit_depth != 16 {
        return Err(Error::invalid(format!("bit depth must be 8 or 16, got {bit_depth}")));
    }
    match extension(path)?.as_str() {
        "png" => save_png(path, img, bit_depth),
        "pgm" => {
            if img.channels() != 1 {
                return Err(Error::invalid("PGM stores single-channel images only"));
            }
            save_pnm(path, img, bit_depth)
        }
        "ppm" => {
            if img.channels() != 3 {
                return Err(Error::invalid("PPM stores 3-channel images only"));
            }
            save_pnm(path, img, bit_depth)
        }
        other => Err(Error::UnsupportedLayout {
            path: path.to_path_buf(),
            detail: format!("unknown image extension {other:?}"),
        }),
    }
}

/// Loads a grayscale file and tags it with a CFA layout.
pub fn load_mosaic(path: &Path, layout: CfaLayout) -> Result<BayerMosaic> {
    let img = load_image(path)?;
    if img.channels() != 1 {
        return Err(Error::UnsupportedLayout {
            path: path.to_path_buf(),
            detail: "mosaic files must be single-channel".into(),
        });
    }
    BayerMosaic::from_samples(img.width(), img.height(), layout, img.samples().to_vec())
}

/// Saves the raw mosaic plane as a grayscale file.
pub fn save_mosaic(path: &Path, mosaic: &BayerMosaic, bit_depth: u32) -> Result<()> {
    let img = RasterImage::from_samples(mosaic.width(), mosaic.height(), 1, mosaic.samples().to_vec())?;
    save_image(path, &img, bit_depth)
}

/// Parses a kernel text file: first token is the odd side length, followed
/// by side*side weights row-major. `#` starts a comment running to the end
/// of the line. Weights are validated like any other kernel.
pub fn load_kernel(path: &Path) -> Result<BlurKernel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    let malformed = |detail: String| Error::MalformedFile { path: path.to_path_buf(), detail };
    if tokens.is_empty() {
        return Err(malformed("empty kernel file".into()));
    }
    let side: usize = tokens[0]
        .parse()
        .map_err(|_| malformed(format!("side token {:?} is not an integer", tokens[0])))?;
    let expected = side.checked_mul(side).ok_or_else(|| malformed("side overflows".into()))?;
    if tokens.len() != expected + 1 {
        return Err(malformed(format!("expected {} weights for side {side}, found {}", expected, tokens.len() - 1)));
    }
    let mut weights = Vec::with_capacity(expected);
    for t in &tokens[1..] {
        weights.push(t.parse::<f64>().map_err(|_| malformed(format!("weight token {t:?} is not a number")))?);
    }
    BlurKernel::new(side, weights)
}

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::UnsupportedLayout {
            path: path.to_path_buf(),
            detail: "missing file extension".into(),
        })
}

fn load_png(path: &Path) -> Result<RasterImage> {
    let dynimg = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let unsupported = |detail: &str| Error::UnsupportedLayout { path: path.to_path_buf(), detail: detail.into() };
    match dynimg {
        image::DynamicImage::ImageLuma8(buf) => {
            let samples = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            RasterImage::from_samples(w, h, 1, samples)
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let samples = buf.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            RasterImage::from_samples(w, h, 1, samples)
        }
        image::DynamicImage::ImageRgb8(buf) => {
            let raw = buf.as_raw();
            RasterImage::from_samples(w, h, 3, interleaved_to_planar(raw, w * h, |&v| v as f64 / 255.0))
        }
        image::DynamicImage::ImageRgb16(buf) => {
            let raw = buf.as_raw();
            RasterImage::from_samples(w, h, 3, interleaved_to_planar(raw, w * h, |&v| v as f64 / 65535.0))
        }
        _ => Err(unsupported("only 8/16-bit grayscale and RGB without alpha are supported")),
    }
}

fn interleaved_to_planar<T, F: Fn(&T) -> f64>(raw: &[T], pixels: usize, conv: F) -> Vec<f64> {
    let mut planar = vec![0.0; pixels * 3];
    for (i, chunk) in raw.chunks_exact(3).enumerate() {
        planar[i] = conv(&chunk[0]);
        planar[pixels + i] = conv(&chunk[1]);
        planar[2 * pixels + i] = conv(&chunk[2]);
    }
    planar
}

fn save_png(path: &Path, img: &RasterImage, bit_depth: u32) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let n = img.width() * img.height();
    let imgerr = |e| Error::Image { path: path.to_path_buf(), source: e };
    match (img.channels(), bit_depth) {
        (1, 8) => {
            let data: Vec<u8> = img.plane(0).iter().map(|&v| quantize(v, 255.0) as u8).collect();
            image::GrayImage::from_raw(w, h, data).unwrap().save(path).map_err(imgerr)
        }
        (1, 16) => {
            let data: Vec<u16> = img.plane(0).iter().map(|&v| quantize(v, 65535.0) as u16).collect();
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, data)
                .unwrap()
                .save(path)
                .map_err(imgerr)
        }
        (3, 8) => {
            let mut data = vec![0u8; n * 3];
            for c in 0..3 {
                let plane = img.plane(c);
                for i in 0..n {
                    data[i * 3 + c] = quantize(plane[i], 255.0) as u8;
                }
            }
            image::RgbImage::from_raw(w, h, data).unwrap().save(path).map_err(imgerr)
        }
        (3, 16) => {
            let mut data = vec![0u16; n * 3];
            for c in 0..3 {
                let plane = img.plane(c);
                for i in 0..n {
                    data[i * 3 + c] = quantize(plane[i], 65535.0) as u16;
                }
            }
            image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, data)
                .unwrap()
                .save(path)
                .map_err(imgerr)
        }
        _ => unreachable!("channel count validated on construction"),
    }
}

/// Round half away from zero onto [0, maxval].
#[inline]
fn quantize(v: f64, maxval: f64) -> u32 {
    (v * maxval).round().clamp(0.0, maxval) as u32
}

fn load_pnm(path: &Path) -> Result<RasterImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |detail: &str| Error::MalformedFile { path: path.to_path_buf(), detail: detail.into() };

    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Option<(usize, usize)> {
        let mut i = pos;
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        if i >= bytes.len() {
            return None;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        pos = i;
        Some((start, i))
    };

    let (s, e) = next_token(&bytes).ok_or_else(|| malformed("missing magic number"))?;
    let magic = std::str::from_utf8(&bytes[s..e]).map_err(|_| malformed("magic is not ASCII"))?;
    let channels = match magic {
        "P5" => 1,
        "P6" => 3,
        _ => {
            return Err(Error::UnsupportedLayout {
                path: path.to_path_buf(),
                detail: format!("unsupported PNM magic {magic:?}, only binary P5/P6 are read"),
            })
        }
    };
    let mut parse_usize = |name: &str| -> Result<usize> {
        let (s, e) = next_token(&bytes).ok_or_else(|| malformed(&format!("missing {name}")))?;
        std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| malformed(&format!("bad {name} token")))
    };
    let width = parse_usize("width")?;
    let height = parse_usize("height")?;
    let maxval = parse_usize("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(malformed("maxval outside 1..=65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing raster separator"));
    }
    let data = &bytes[pos + 1..];
    let values = width * height * channels;
    let scale = 1.0 / maxval as f64;
    let mut flat = Vec::with_capacity(values);
    if maxval < 256 {
        if data.len() < values {
            return Err(malformed("truncated raster data"));
        }
        flat.extend(data[..values].iter().map(|&b| (b as f64 * scale).min(1.0)));
    } else {
        if data.len() < values * 2 {
            return Err(malformed("truncated raster data"));
        }
        for i in 0..values {
            let v = u16::from_be_bytes([data[2 * i], data[2 * i + 1]]);
            flat.push((v as f64 * scale).min(1.0));
        }
    }
    let samples = if channels == 1 {
        flat
    } else {
        let pixels = width * height;
        let mut planar = vec![0.0; pixels * 3];
        for i in 0..pixels {
            planar[i] = flat[i * 3];
            planar[pixels + i] = flat[i * 3 + 1];
            planar[2 * pixels + i] = flat[i * 3 + 2];
        }
        planar
    };
    RasterImage::from_samples(width, height, channels, samples)
}

fn save_pnm(path: &Path, img: &RasterImage, bit_depth: u32) -> Result<()> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let magic = if c == 1 { "P5" } else { "P6" };
    let maxval: u32 = if bit_depth == 8 { 255 } else { 65535 };
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    let n = w * h;
    for i in 0..n {
        for ch in 0..c {
            let q = quantize(img.plane(ch)[i], maxval as f64);
            if maxval == 255 {
                out.push(q as u8);
            } else {
                out.extend_from_slice(&(q as u16).to_be_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, c: usize) -> RasterImage {
        let n = w * h * c;
        let samples = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        RasterImage::from_samples(w, h, c, samples).unwrap()
    }

    fn quantized(img: &RasterImage, maxval: f64) -> Vec<f64> {
        img.samples().iter().map(|&v| (v * maxval).round() / maxval).collect()
    }

    #[test]
    fn png_round_trips_at_both_depths() {
        let dir = tempfile::tempdir().unwrap();
        for (c, name) in [(1, "g"), (3, "rgb")] {
            for depth in [8u32, 16] {
                let img = ramp(5, 4, c);
                let path = dir.path().join(format!("{name}_{depth}.png"));
                save_image(&path, &img, depth).unwrap();
                let back = load_image(&path).unwrap();
                assert_eq!(back.channels(), c);
                let maxval = if depth == 8 { 255.0 } else { 65535.0 };
                let expect = quantized(&img, maxval);
                for (a, b) in back.samples().iter().zip(expect) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pnm_round_trips_at_both_depths() {
        let dir = tempfile::tempdir().unwrap();
        for (c, ext) in [(1, "pgm"), (3, "ppm")] {
            for depth in [8u32, 16] {
                let img = ramp(6, 3, c);
                let path = dir.path().join(format!("img_{depth}.{ext}"));
                save_image(&path, &img, depth).unwrap();
                let back = load_image(&path).unwrap();
                assert_eq!((back.width(), back.height(), back.channels()), (6, 3, c));
                let maxval = if depth == 8 { 255.0 } else { 65535.0 };
                let expect = quantized(&img, maxval);
                for (a, b) in back.samples().iter().zip(expect) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5 # magic\n# a comment line\n2 2\n255\n\x00\x7f\x80\xff").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.get(1, 1, 0), 1.0);
        assert_eq!(img.get(0, 0, 0), 0.0);
    }

    #[test]
    fn truncated_pnm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(load_image(&path), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn alpha_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let buf = image::RgbaImage::from_pixel(2, 2, image::Rgba([1, 2, 3, 4]));
        buf.save(&path).unwrap();
        assert!(matches!(load_image(&path), Err(Error::UnsupportedLayout { .. })));
    }

    #[test]
    fn kernel_file_parses_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        std::fs::write(&path, "# box kernel\n3\n0.1 0.1 0.1\n0.1 0.2 0.1 # center\n0.1 0.1 0.1\n").unwrap();
        let k = load_kernel(&path).unwrap();
        assert_eq!(k.side(), 3);
        assert!((k.weights()[4] - 0.2).abs() < 1e-12);

        std::fs::write(&path, "3\n0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5 0.5\n").unwrap();
        assert!(load_kernel(&path).is_err(), "sum != 1 must fail");
        std::fs::write(&path, "2\n0.25 0.25 0.25 0.25\n").unwrap();
        assert!(load_kernel(&path).is_err(), "even side must fail");
    }

    #[test]
    fn mosaic_round_trip_keeps_layout() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(4, 4, 3);
        let m = crate::raster::mosaic(&img, CfaLayout::Grbg).unwrap();
        let path = dir.path().join("m.pgm");
        save_mosaic(&path, &m, 16).unwrap();
        let back = load_mosaic(&path, CfaLayout::Grbg).unwrap();
        assert_eq!(back.layout(), CfaLayout::Grbg);
        for (a, b) in back.samples().iter().zip(m.samples()) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }
}
