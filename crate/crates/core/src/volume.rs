//! Dense 3-D scalar fields and their on-disk "AVOL" format.
//!
//! AVOL layout (little-endian): magic `AVOL`, version u16 = 1, extents
//! D, H, W as u32, then D*H*W f32 voxels in z-major (depth-major row-major)
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::NdTensor;
use crate::{Error, Result};

pub const AVOL_MAGIC: &[u8; 4] = b"AVOL";
pub const AVOL_VERSION: u16 = 1;

/// Guard against absurd extents before allocating (1 GiB of voxels).
const MAX_VOXELS: u64 = 1 << 28;

/// Single-channel volumetric scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: (usize, usize, usize),
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(shape: (usize, usize, usize), voxels: Vec<f32>) -> Result<Self> {
        let (d, h, w) = shape;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::shape("Volume::new", format!("non-positive shape {shape:?}")));
        }
        if voxels.len() != d * h * w {
            return Err(Error::shape(
                "Volume::new",
                format!("{} voxels for shape {shape:?}", voxels.len()),
            ));
        }
        Ok(Volume { shape, voxels })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Volume { shape, voxels: vec![0.0; shape.0 * shape.1 * shape.2] }
    }

    pub fn from_fn(shape: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let (d, h, w) = shape;
        let mut voxels = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    voxels.push(f(z, y, x));
                }
            }
        }
        Volume { shape, voxels }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.voxels.len()
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = self.shape;
        self.voxels[(z * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.voxels.iter().all(|v| v.is_finite())
    }

    pub fn clamp_in_place(&mut self, lo: f32, hi: f32) {
        for v in &mut self.voxels {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Volume { shape: self.shape, voxels: self.voxels.iter().map(|&v| f(v)).collect() }
    }

    /// View as a [1, D, H, W] tensor (VAE input layout).
    pub fn to_tensor(&self) -> NdTensor<f32> {
        let (d, h, w) = self.shape;
        NdTensor::new(vec![1, d, h, w], self.voxels.clone()).expect("volume shape")
    }

    /// Rebuild from a [1, D, H, W] tensor.
    pub fn from_tensor(t: &NdTensor<f32>) -> Result<Self> {
        match t.shape() {
            [1, d, h, w] => Volume::new((*d, *h, *w), t.data().to_vec()),
            other => Err(Error::shape("Volume::from_tensor", format!("expected [1,D,H,W], got {other:?}"))),
        }
    }
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let (d, h, w) = vol.shape;
    let mut buf = Vec::with_capacity(18 + vol.voxels.len() * 4);
    buf.extend_from_slice(AVOL_MAGIC);
    buf.extend_from_slice(&AVOL_VERSION.to_le_bytes());
    for e in [d, h, w] {
        let e32 = u32::try_from(e).map_err(|_| Error::format(6, format!("extent {e} exceeds u32")))?;
        buf.extend_from_slice(&e32.to_le_bytes());
    }
    for v in &vol.voxels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_volume(&bytes)
}

pub fn parse_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != AVOL_MAGIC {
        return Err(Error::format(0, "bad magic, expected AVOL"));
    }
    if bytes.len() < 6 {
        return Err(Error::format(4, "truncated version field"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != AVOL_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    if bytes.len() < 18 {
        return Err(Error::format(6, "truncated extents"));
    }
    let mut ext = [0u32; 3];
    for (i, e) in ext.iter_mut().enumerate() {
        let off = 6 + 4 * i;
        *e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if *e == 0 {
            return Err(Error::format(off as u64, "zero extent"));
        }
    }
    let numel = ext
        .iter()
        .try_fold(1u64, |acc, &e| acc.checked_mul(e as u64))
        .filter(|&n| n <= MAX_VOXELS)
        .ok_or_else(|| Error::format(6, format!("extent overflow: {ext:?}")))?;
    let payload = numel as usize * 4;
    if bytes.len() != 18 + payload {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload must be {payload} bytes, file has {}", bytes.len() - 18),
        ));
    }
    let voxels: Vec<f32> = bytes[18..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new((ext[0] as usize, ext[1] as usize, ext[2] as usize), voxels)
}

/// Mid-axial (z = D/2) slice as a binary PGM (P5), mapping [-1, 1] to 0..255.
pub fn write_pgm_slice(path: &Path, vol: &Volume) -> Result<()> {
    let (d, h, w) = vol.shape;
    let z = d / 2;
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = vol.at(z, y, x).clamp(-1.0, 1.0);
            buf.push(((v + 1.0) * 127.5).round() as u8);
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = crate::rng::rng_from(5);
        let vol = Volume::from_fn((8, 9, 10), |_, _, _| rng.gen_range(-1.0..1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.avol");
        write_volume(&path, &vol).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.shape(), (8, 9, 10));
        let same = back
            .voxels()
            .iter()
            .zip(vol.voxels())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "round-trip must be bit-exact");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"XVOL");
        bytes.extend_from_slice(&AVOL_VERSION.to_le_bytes());
        match parse_volume(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at byte 0, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let vol = Volume::zeros((2, 2, 2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.avol");
        write_volume(&path, &vol).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(parse_volume(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn paper_scale_header_declares_exact_payload() {
        // A 160x180x160 header implies a 160*180*160*4-byte payload.
        let vol = Volume::zeros((160, 180, 160));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.avol");
        write_volume(&path, &vol).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 18 + 160 * 180 * 160 * 4);
        let back = read_volume(&path).unwrap();
        assert_eq!(back.shape(), (160, 180, 160));
    }

    #[test]
    fn extent_overflow_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(AVOL_MAGIC);
        bytes.extend_from_slice(&AVOL_VERSION.to_le_bytes());
        for e in [u32::MAX, u32::MAX, 2u32] {
            bytes.extend_from_slice(&e.to_le_bytes());
        }
        match parse_volume(&bytes) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("overflow")),
            other => panic!("expected overflow rejection, got {other:?}"),
        }
    }

    #[test]
    fn pgm_slice_has_expected_header_and_size() {
        let vol = Volume::from_fn((4, 5, 6), |z, y, x| (z + y + x) as f32 / 15.0 - 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        write_pgm_slice(&path, &vol).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n6 5\n255\n"));
        assert_eq!(bytes.len(), b"P5\n6 5\n255\n".len() + 30);
    }
}
