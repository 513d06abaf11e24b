//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ICLFGDCK"
//! 8       4     format version (u32) = 1
//! 12      4     d (u32)
//! 16      4     number of layers k+1 (u32)
//! 20      1     activation tag: 0 linear, 1 relu, 2 exp, 3 softmax
//! 21      k+1   per-layer A-block tag: 0 zero, 1 full
//! ...           per layer, in order: r (f64), B (d·d f64, row-major),
//!               C (d·d f64), then A (d·d f64) when its tag is 1
//! ```
//!
//! Nothing follows the last layer.

use std::io::{Read, Write};

use super::{ABlock, Activation, LayerParams, TfParams};
use crate::error::{Error, Result};
use crate::linalg::Mat;

const MAGIC: &[u8; 8] = b"ICLFGDCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, params: &TfParams, act: Activation) -> Result<()> {
    params.validate()?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.d() as u32).to_le_bytes())?;
    out.write_all(&(params.num_layers() as u32).to_le_bytes())?;
    out.write_all(&[act.code()])?;
    for l in &params.layers {
        out.write_all(&[matches!(l.a, ABlock::Full(_)) as u8])?;
    }
    for l in &params.layers {
        out.write_all(&l.r.to_le_bytes())?;
        for m in [Some(&l.b), Some(&l.c), l.a_matrix()].into_iter().flatten() {
            for v in m.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(TfParams, Activation)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(8)? != MAGIC {
        return Err(Error::Format("not a parameter checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let d = cur.u32()? as usize;
    let layers = cur.u32()? as usize;
    if d == 0 || layers == 0 {
        return Err(Error::Format("checkpoint with empty dimensions".into()));
    }
    let act = Activation::from_code(cur.take(1)?[0])
        .ok_or_else(|| Error::Format("unknown activation tag".into()))?;
    let tags = cur.take(layers)?.to_vec();

    let mut out = Vec::with_capacity(layers);
    for tag in tags {
        let r = cur.f64()?;
        let b = cur.mat(d)?;
        let c = cur.mat(d)?;
        let a = match tag {
            0 => ABlock::Zero,
            1 => ABlock::Full(cur.mat(d)?),
            t => return Err(Error::Format(format!("unknown A-block tag {t}"))),
        };
        out.push(LayerParams { a, r, b, c });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    let params = TfParams { layers: out };
    params.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok((params, act))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mat(&mut self, d: usize) -> Result<Mat> {
        let data = (0..d * d).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Mat::from_vec(d, d, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn round_trip_mixed_layers() {
        let mut rng = Rng::new(1);
        let mut params = TfParams::gaussian(3, 3, true, 1.0, &mut rng);
        params.layers[1].a = ABlock::Zero;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, Activation::MaskedSoftmax).unwrap();
        assert_eq!(buf.len(), 21 + 3 + 3 * 8 * (1 + 9 + 9) + 2 * 8 * 9);
        let (back, act) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, params);
        assert_eq!(act, Activation::MaskedSoftmax);
    }

    #[test]
    fn header_layout() {
        let params = TfParams::zeros(2, 1, false);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, Activation::ReluDot).unwrap();
        assert_eq!(&buf[..8], b"ICLFGDCK");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1u32.to_le_bytes());
        assert_eq!(buf[20], 1);
        assert_eq!(buf[21], 0);
    }

    #[test]
    fn rejects_corrupt_input() {
        let params = TfParams::zeros(2, 2, true);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, Activation::LinearDot).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());
        let mut bad_tag = buf;
        bad_tag[21] = 7;
        assert!(read_checkpoint(bad_tag.as_slice()).is_err());
    }
}
