use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::MultiChannelImage;
use crate::error::{Error, Result};

/// JSON sidecar describing a `.f32` payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct F32MapHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

/// `foo.f32` -> `foo.json`.
fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes little-endian f32 samples (channel-major) plus the JSON sidecar.
pub fn write_f32map(map: &MultiChannelImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = map.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "non-finite value {} at index {i} while writing {}",
            map.data()[i],
            path.display()
        )));
    }
    let mut bytes = Vec::with_capacity(map.data().len() * 4);
    for v in map.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = F32MapHeader {
        width: map.width(),
        height: map.height(),
        channels: map.channels(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string(&header).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_f32map(path: impl AsRef<Path>) -> Result<MultiChannelImage> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: F32MapHeader = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.width * header.height * header.channels;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!(
                "sidecar says {}x{}x{} ({expected} floats) but payload holds {} bytes",
                header.width,
                header.height,
                header.channels,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    MultiChannelImage::new(header.width, header.height, header.channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_mismatch_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.f32");
        fs::write(&p, vec![0u8; 15 * 4]).unwrap();
        fs::write(
            d.path().join("m.json"),
            r#"{"width":4,"height":4,"channels":1}"#,
        )
        .unwrap();
        let err = read_f32map(&p).unwrap_err().to_string();
        assert!(err.contains("payload"), "{err}");
    }

    #[test]
    fn nan_is_rejected_on_write() {
        let d = tempfile::tempdir().unwrap();
        let m = MultiChannelImage::new(2, 1, 1, vec![0.0, f32::NAN]).unwrap();
        let err = write_f32map(&m, d.path().join("m.f32"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("non-finite value"), "{err}");
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            w in 1usize..9,
            h in 1usize..9,
            c in 1usize..3,
            bits in proptest::collection::vec(any::<u32>(), 200),
        ) {
            let d = tempfile::tempdir().unwrap();
            let p = d.path().join("m.f32");
            let data: Vec<f32> = (0..w * h * c)
                .map(|i| {
                    let v = f32::from_bits(bits[i % bits.len()]);
                    if v.is_finite() { v } else { i as f32 }
                })
                .collect();
            let m = MultiChannelImage::new(w, h, c, data).unwrap();
            write_f32map(&m, &p).unwrap();
            let back = read_f32map(&p).unwrap();
            prop_assert_eq!(back.width(), w);
            prop_assert_eq!(back.channels(), c);
            let a: Vec<u32> = m.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
