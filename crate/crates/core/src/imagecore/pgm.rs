use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinaryMask, FrameStack, Image};
use crate::error::{Error, Result};

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | b'\x0b' | b'\x0c')
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && is_space(bytes[*pos]) {
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
    while *pos < bytes.len() && !is_space(bytes[*pos]) && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str, path: &Path) -> Result<usize> {
    let tok = header_token(bytes, pos)
        .ok_or_else(|| Error::format(path, format!("malformed header: missing {what}")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::format(path, format!("malformed header: bad {what}")))
}

/// Decodes a binary PGM into raw sample values and the maxval.
fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, u32, Vec<u32>)> {
    let mut pos = 0;
    match header_token(bytes, &mut pos) {
        Some(b"P5") => {}
        Some(_) => {
            return Err(Error::format(
                path,
                "unsupported format (only binary P5 PGM is read)",
            ))
        }
        None => return Err(Error::format(path, "malformed header: empty file")),
    }
    let width = header_number(bytes, &mut pos, "width", path)?;
    let height = header_number(bytes, &mut pos, "height", path)?;
    let maxval = header_number(bytes, &mut pos, "maxval", path)?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "malformed header: zero dimension"));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::format(
            path,
            format!("unsupported maxval {maxval} (expected 255 or 65535)"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !is_space(bytes[pos]) {
        return Err(Error::format(
            path,
            "malformed header: no separator before payload",
        ));
    }
    pos += 1;
    let n = width * height;
    let bps = if maxval == 255 { 1 } else { 2 };
    let payload = &bytes[pos..];
    if payload.len() < n * bps {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: expected {} bytes, found {}",
                n * bps,
                payload.len()
            ),
        ));
    }
    let samples: Vec<u32> = if bps == 1 {
        payload[..n].iter().map(|&b| b as u32).collect()
    } else {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(Error::format(path, "sample exceeds maxval"));
    }
    Ok((width, height, maxval as u32, samples))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a binary (P5) PGM, scaling samples to `[0, 1]` by the maxval.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let (w, h, maxval, samples) = decode_pgm(&read_bytes(path)?, path)?;
    let scale = maxval as f64;
    let data = samples.iter().map(|&s| (s as f64 / scale) as f32).collect();
    Image::new_normalized(w, h, data)
}

fn encode_pgm(
    width: usize,
    height: usize,
    maxval: u32,
    samples: impl Iterator<Item = u32>,
) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval == 255 {
        out.extend(samples.map(|s| s as u8));
    } else {
        for s in samples {
            out.extend_from_slice(&(s as u16).to_be_bytes());
        }
    }
    out
}

/// Encodes `v` as `floor(v * maxval + 0.5)` (round half up).
pub fn write_pgm(img: &Image, maxval: u32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if maxval != 255 && maxval != 65535 {
        return Err(Error::invalid(format!(
            "unsupported maxval {maxval} (expected 255 or 65535)"
        )));
    }
    img.require_normalized("write_pgm")?;
    let m = maxval as f64;
    let bytes = encode_pgm(
        img.width(),
        img.height(),
        maxval,
        img.data()
            .iter()
            .map(|&v| (v as f64 * m + 0.5).floor() as u32),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a mask as an 8-bit PGM with foreground 255.
pub fn write_mask_pgm(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(
        mask.width(),
        mask.height(),
        255,
        mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a mask PGM; any nonzero sample is foreground.
pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let (w, h, _, samples) = decode_pgm(&read_bytes(path)?, path)?;
    BinaryMask::new(w, h, samples.iter().map(|&s| (s != 0) as u8).collect())
}

/// `manifest.json` of a frame-stack directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameManifest {
    pub frames: Vec<String>,
}

/// Loads the frames listed in `dir/manifest.json`, in manifest order.
pub fn read_framestack(dir: impl AsRef<Path>) -> Result<FrameStack> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: FrameManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.frames.len() < 2 {
        return Err(Error::format(
            &manifest_path,
            format!("need >=2 frames, manifest lists {}", manifest.frames.len()),
        ));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for name in &manifest.frames {
        let path = dir.join(name);
        let img = read_pgm(&path)?;
        if let Some(first) = frames.first() {
            let first: &Image = first;
            if img.width() != first.width() || img.height() != first.height() {
                return Err(Error::format(
                    &path,
                    format!(
                        "dimension mismatch: {}x{} but first frame is {}x{}",
                        img.width(),
                        img.height(),
                        first.width(),
                        first.height()
                    ),
                ));
            }
        }
        frames.push(img);
    }
    FrameStack::from_frames(&frames)
}

/// Writes every frame as an 8-bit PGM plus the manifest. Frame values are
/// clamped to `[0, 1]` before encoding.
pub fn write_framestack(stack: &FrameStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(stack.frames());
    for i in 0..stack.frames() {
        let name = format!("frame_{i:04}.pgm");
        let frame = Image::new_normalized(
            stack.width(),
            stack.height(),
            stack.frame(i).iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )?;
        write_pgm(&frame, 255, dir.join(&name))?;
        names.push(name);
    }
    let manifest = FrameManifest { frames: names };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn reads_8bit_scaled() {
        let d = tmp();
        let p = d.path().join("a.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 64]);
        fs::write(&p, &bytes).unwrap();
        let img = read_pgm(&p).unwrap();
        let expect = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (a, b) in img.data().iter().zip(expect) {
            assert_eq!(*a, b as f32);
        }
        assert!(img.is_normalized());
    }

    #[test]
    fn header_comments_are_skipped() {
        let d = tmp();
        let p = d.path().join("c.pgm");
        let mut bytes = b"P5 # comment\n# another\n1 1\n255\n".to_vec();
        bytes.push(255);
        fs::write(&p, &bytes).unwrap();
        assert_eq!(read_pgm(&p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn rejects_ascii_pgm() {
        let d = tmp();
        let p = d.path().join("a.pgm");
        fs::write(&p, b"P2\n1 1\n255\n0\n").unwrap();
        let err = read_pgm(&p).unwrap_err().to_string();
        assert!(err.contains("unsupported format"), "{err}");
    }

    #[test]
    fn rejects_truncated_and_bad_maxval() {
        let d = tmp();
        let p = d.path().join("t.pgm");
        fs::write(&p, b"P5\n2 2\n255\n\x00\x01").unwrap();
        assert!(read_pgm(&p).unwrap_err().to_string().contains("truncated"));
        fs::write(&p, b"P5\n1 1\n100\n\x00").unwrap();
        assert!(read_pgm(&p)
            .unwrap_err()
            .to_string()
            .contains("unsupported maxval"));
        fs::write(&p, b"P5\n1\n").unwrap();
        assert!(read_pgm(&p)
            .unwrap_err()
            .to_string()
            .contains("malformed header"));
    }

    #[test]
    fn write_rounding_rules() {
        let d = tmp();
        let p = d.path().join("w.pgm");
        write_pgm(&Image::zeros(3, 1), 255, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 0]);

        let half = Image::new_normalized(1, 1, vec![0.5]).unwrap();
        write_pgm(&half, 255, &p).unwrap();
        assert_eq!(*fs::read(&p).unwrap().last().unwrap(), 128);

        let one = Image::new_normalized(1, 1, vec![1.0]).unwrap();
        write_pgm(&one, 65535, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[0xFF, 0xFF]);
    }

    #[test]
    fn write_rejects_unnormalized() {
        let d = tmp();
        let img = Image::new(1, 1, vec![2.0]).unwrap();
        assert!(write_pgm(&img, 255, d.path().join("x.pgm")).is_err());
    }

    #[test]
    fn framestack_manifest_rules() {
        let d = tmp();
        let one = Image::new_normalized(2, 2, vec![0.0; 4]).unwrap();
        write_pgm(&one, 255, d.path().join("f0.pgm")).unwrap();
        fs::write(d.path().join("manifest.json"), r#"{"frames":["f0.pgm"]}"#).unwrap();
        assert!(read_framestack(d.path())
            .unwrap_err()
            .to_string()
            .contains("need >=2 frames"));

        let other = Image::new_normalized(3, 2, vec![0.0; 6]).unwrap();
        write_pgm(&other, 255, d.path().join("f1.pgm")).unwrap();
        fs::write(
            d.path().join("manifest.json"),
            r#"{"frames":["f0.pgm","f1.pgm"]}"#,
        )
        .unwrap();
        assert!(read_framestack(d.path())
            .unwrap_err()
            .to_string()
            .contains("dimension mismatch"));

        let e = tmp();
        assert!(read_framestack(e.path()).unwrap_err().is_io());
    }

    #[test]
    fn framestack_of_75_frames() {
        let d = tmp();
        let frames: Vec<Image> = (0..75)
            .map(|i| Image::from_fn(4, 3, |x, y| (((x + y + i) % 5) * 51) as f32 / 255.0))
            .collect();
        let stack = FrameStack::from_frames(&frames).unwrap();
        write_framestack(&stack, d.path()).unwrap();
        let back = read_framestack(d.path()).unwrap();
        assert_eq!(back.frames(), 75);
        assert_eq!(back.frame(3), stack.frame(3));
    }

    #[test]
    fn mask_pgm_round_trip() {
        let d = tmp();
        let m = BinaryMask::from_fn(5, 4, |x, y| (x * y) % 3 == 1);
        write_mask_pgm(&m, d.path().join("m.pgm")).unwrap();
        assert_eq!(read_mask_pgm(d.path().join("m.pgm")).unwrap(), m);
    }

    proptest! {
        #[test]
        fn pgm8_bytes_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let d = tmp();
            let p = d.path().join("r.pgm");
            let q = d.path().join("s.pgm");
            let mut rng = crate::imagecore::RngStream::new(seed, 0);
            let payload: Vec<u8> = (0..w * h).map(|_| rng.below(256) as u8).collect();
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&payload);
            fs::write(&p, &bytes).unwrap();
            write_pgm(&read_pgm(&p).unwrap(), 255, &q).unwrap();
            prop_assert_eq!(fs::read(&q).unwrap(), bytes);
        }

        #[test]
        fn pgm16_samples_round_trip(w in 1usize..8, h in 1usize..8, seed in any::<u64>()) {
            let d = tmp();
            let p = d.path().join("r.pgm");
            let q = d.path().join("s.pgm");
            let mut rng = crate::imagecore::RngStream::new(seed, 1);
            let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
            for _ in 0..w * h {
                bytes.extend_from_slice(&(rng.below(65536) as u16).to_be_bytes());
            }
            fs::write(&p, &bytes).unwrap();
            write_pgm(&read_pgm(&p).unwrap(), 65535, &q).unwrap();
            prop_assert_eq!(fs::read(&q).unwrap(), bytes);
        }
    }
}
