//! Weight file: magic `ACATW1\0`, then per layer a type byte, its dims as
//! little-endian `u32`, and its parameters as little-endian `f32` in
//! declaration order (weights, then bias). Layers run to end of file.

use std::fs;
use std::path::Path;

use super::{Layer, SlicedNetwork};
use crate::error::{AcatError, Result};
use crate::tensor::ConvKernel;

pub const WEIGHTS_MAGIC: &[u8; 7] = b"ACATW1\0";

const TAG_CONV: u8 = 1;
const TAG_UPSAMPLE: u8 = 2;

pub fn encode_weights(net: &SlicedNetwork) -> Vec<u8> {
    let mut out = WEIGHTS_MAGIC.to_vec();
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for layer in net.layers() {
        match layer {
            Layer::Conv {
                kernel,
                bias,
                stride,
                padding,
                relu,
            } => {
                out.push(TAG_CONV);
                for d in [
                    kernel.out_channels,
                    kernel.in_channels,
                    kernel.kernel_h,
                    kernel.kernel_w,
                    *stride,
                    *padding,
                    usize::from(*relu),
                ] {
                    put_u32(&mut out, d);
                }
                for v in kernel.weights.iter().chain(bias) {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Layer::Upsample { factor } => {
                out.push(TAG_UPSAMPLE);
                put_u32(&mut out, *factor);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(AcatError::format(
                self.bytes.len() as u64,
                format!("file truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| AcatError::format(self.pos as u64, format!("{what} size overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }
}

/// Parses a weight file; never returns a partially built network.
pub fn decode_weights(bytes: &[u8]) -> Result<SlicedNetwork> {
    if let Some(pos) = WEIGHTS_MAGIC
        .iter()
        .enumerate()
        .position(|(i, m)| bytes.get(i) != Some(m))
    {
        return Err(AcatError::format(pos as u64, "bad magic, expected ACATW1\\0"));
    }
    let mut r = Reader {
        bytes,
        pos: WEIGHTS_MAGIC.len(),
    };
    let mut layers = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let tag = r.take(1, "layer type")?[0];
        match tag {
            TAG_CONV => {
                let mut d = [0usize; 7];
                for v in &mut d {
                    *v = r.u32("conv dims")?;
                }
                let [oc, ic, kh, kw, stride, padding, relu] = d;
                if relu > 1 {
                    return Err(AcatError::format(start as u64 + 25, format!("relu flag {relu}")));
                }
                let n = oc
                    .checked_mul(ic)
                    .and_then(|v| v.checked_mul(kh))
                    .and_then(|v| v.checked_mul(kw))
                    .ok_or_else(|| AcatError::format(start as u64, "conv dims overflow"))?;
                let weights = r.f32s(n, "conv weights")?;
                let bias = r.f32s(oc, "conv bias")?;
                layers.push(Layer::Conv {
                    kernel: ConvKernel::new(oc, ic, kh, kw, weights)?,
                    bias,
                    stride,
                    padding,
                    relu: relu == 1,
                });
            }
            TAG_UPSAMPLE => {
                let factor = r.u32("upsample factor")?;
                layers.push(Layer::Upsample { factor });
            }
            other => {
                return Err(AcatError::format(start as u64, format!("unknown layer type {other}")));
            }
        }
    }
    if layers.is_empty() {
        return Err(AcatError::format(r.pos as u64, "no layers"));
    }
    SlicedNetwork::new(layers).map_err(|e| AcatError::format(0, format!("inconsistent layers: {e}")))
}

pub fn save_weights(net: &SlicedNetwork, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(net))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<SlicedNetwork> {
    decode_weights(&fs::read(path)?)
}
