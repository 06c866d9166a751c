//! `DMF1` binary feature files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DMF1" | u32 version=1 | u32 count
//! per video: u32 id | i32 label (-1 = none) | u8 domain | u32 M | u32 D | M·D × f32
//! ```
//!
//! Trailing bytes after the last video are rejected.

use std::path::Path;

use super::{Dataset, Domain, VideoFeature};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DMF_MAGIC: &[u8; 4] = b"DMF1";
pub const DMF_VERSION: u32 = 1;

pub fn encode_features(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DMF_MAGIC);
    out.extend_from_slice(&DMF_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(ds.videos.len()).map_err(|_| too_big("video count"))?.to_le_bytes());
    for v in &ds.videos {
        let label = match v.label {
            Some(l) => i32::try_from(l).map_err(|_| too_big("label"))?,
            None => -1,
        };
        out.extend_from_slice(&v.id.to_le_bytes());
        out.extend_from_slice(&label.to_le_bytes());
        out.push(v.domain.code());
        out.extend_from_slice(&(v.num_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(v.dim() as u32).to_le_bytes());
        for &x in v.frames.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn too_big(what: &str) -> Error {
    Error::Data(format!("{what} does not fit the file format"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != DMF_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}, expected \"DMF1\"") });
    }
    let version = r.u32("version")?;
    if version != DMF_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = r.u32("video count")? as usize;
    let mut videos = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = r.pos;
        let id = r.u32("video id")?;
        let label = r.i32("label")?;
        let dom_at = r.pos;
        let domain = Domain::from_code(r.u8("domain")?)
            .ok_or_else(|| Error::Format { offset: dom_at, msg: format!("video {i}: unknown domain code") })?;
        let m = r.u32("frame count")? as usize;
        let d = r.u32("feature dim")? as usize;
        if m == 0 || d == 0 {
            return Err(Error::Format { offset: start, msg: format!("video {i}: empty {m}×{d} matrix") });
        }
        let n = m.checked_mul(d).ok_or_else(|| Error::Format { offset: start, msg: "matrix too large".into() })?;
        let raw = r.take(n.saturating_mul(4), "frame values")?;
        let data: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("video {id}: non-finite feature value")));
        }
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Format { offset: start + 4, msg: format!("video {i}: invalid label {l}") }),
        };
        let frames = Tensor::matrix(m, d, data)?;
        videos.push(VideoFeature::new(id, domain, label, frames)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes after the last video", bytes.len() - r.pos),
        });
    }
    Dataset::from_videos(videos)
}

pub fn save_features(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_features(ds)?)?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_features(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, m: usize, d: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let videos = (0..n)
            .map(|i| {
                let data = (0..m * d).map(|_| rng.random_range(-2.0f32..2.0) as f64).collect();
                let label = if i % 2 == 0 { Some(i / 2) } else { None };
                let dom = if label.is_some() { Domain::Source } else { Domain::Target };
                VideoFeature::new(i as u32, dom, label, Tensor::matrix(m, d, data).unwrap()).unwrap()
            })
            .collect();
        Dataset::from_videos(videos).unwrap()
    }

    #[test]
    fn two_videos_full_width() {
        let ds = sample(2, 8, 512);
        let bytes = encode_features(&ds).unwrap();
        assert_eq!(bytes.len(), 12 + 2 * (17 + 8 * 512 * 4));
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.videos.iter().all(|v| v.frames.shape() == [8, 512]));
        assert_eq!(back, ds);
        assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_body() {
        let mut bytes = b"DMF1".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(decode_features(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_features(&sample(3, 2, 3)).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 4, .. })));

        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_features(short), Err(Error::Format { .. })));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_features(&long), Err(Error::Format { .. })));

        let mut nan = bytes.clone();
        let first_value = 12 + 17;
        nan[first_value..first_value + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&nan), Err(Error::Data(_))));
    }
}
