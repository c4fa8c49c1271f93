use crate::{Error, Result};

/// How the bits of a [`BitTensor`] decode to numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Encoding {
    /// bit 1 = +1, bit 0 = -1
    Signed,
    /// bit 1 = 1, bit 0 = 0
    ZeroOne,
}

/// A bit-packed tensor.
///
/// One axis is packed into lanes of 64-bit words; every other axis indexes
/// lanes in row-major order. For an `N,C,H,W` activation packed along `C`
/// the lanes are laid out `N,H,W` (channels-last), and for an `O,I,Kh,Kw`
/// filter bank packed along `I` the lanes are laid out `O,Kh,Kw`.
///
/// Bits past the lane length in the final word of each lane are kept at zero
/// and are masked out by every kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    axis: usize,
    encoding: Encoding,
    lane_len: usize,
    words_per_lane: usize,
    words: Vec<u64>,
}

/// A borrowed lane: `len` meaningful bits stored in `words`.
#[derive(Clone, Copy, Debug)]
pub struct Lane<'a> {
    pub words: &'a [u64],
    pub len: usize,
}

impl<'a> Lane<'a> {
    pub fn new(words: &'a [u64], len: usize) -> Self {
        Lane { words, len }
    }

    /// Bit `i` of the lane.
    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }
}

pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Mask of the meaningful bits in the last word of a lane of `len` bits.
pub(crate) fn tail_mask(len: usize) -> u64 {
    match len % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl BitTensor {
    /// Packs `sign(x)` along `axis`, with `sign(0) = +1`.
    pub fn pack_signs(x: &[f64], shape: &[usize], axis: usize) -> Result<Self> {
        Self::pack_with(x, shape, axis, Encoding::Signed, |v| v >= 0.0)
    }

    /// Packs values already in `{0, 1}` (anything `>= 0.5` becomes a 1 bit).
    pub fn pack_zero_one(x: &[f64], shape: &[usize], axis: usize) -> Result<Self> {
        Self::pack_with(x, shape, axis, Encoding::ZeroOne, |v| v >= 0.5)
    }

    fn pack_with(
        x: &[f64],
        shape: &[usize],
        axis: usize,
        encoding: Encoding,
        is_set: impl Fn(f64) -> bool,
    ) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "packing axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || x.is_empty() {
            return Err(Error::Empty);
        }
        if numel != x.len() {
            return Err(Error::shape("pack", &[numel], &[x.len()]));
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let (outer, len, inner) = split(shape, axis);
        let wpl = words_for(len);
        let mut words = vec![0u64; outer * inner * wpl];
        for o in 0..outer {
            for i in 0..inner {
                let lane = &mut words[(o * inner + i) * wpl..][..wpl];
                for k in 0..len {
                    if is_set(x[(o * len + k) * inner + i]) {
                        lane[k / 64] |= 1 << (k % 64);
                    }
                }
            }
        }
        Ok(BitTensor {
            shape: shape.to_vec(),
            axis,
            encoding,
            lane_len: len,
            words_per_lane: wpl,
            words,
        })
    }

    /// Builds a tensor from raw lane words. Padding bits are cleared.
    pub fn from_words(
        shape: &[usize],
        axis: usize,
        encoding: Encoding,
        mut words: Vec<u64>,
    ) -> Result<Self> {
        if axis >= shape.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("bad bit tensor shape {shape:?} / axis {axis}")));
        }
        let (outer, len, inner) = split(shape, axis);
        let wpl = words_for(len);
        if words.len() != outer * inner * wpl {
            return Err(Error::shape(
                "bit tensor words",
                &[outer * inner * wpl],
                &[words.len()],
            ));
        }
        let mask = tail_mask(len);
        for lane in words.chunks_mut(wpl) {
            lane[wpl - 1] &= mask;
        }
        Ok(BitTensor {
            shape: shape.to_vec(),
            axis,
            encoding,
            lane_len: len,
            words_per_lane: wpl,
            words,
        })
    }

    /// Decodes back to reals in the original (unpacked) element order.
    pub fn unpack(&self) -> Vec<f64> {
        let (outer, len, inner) = split(&self.shape, self.axis);
        let (one, zero) = match self.encoding {
            Encoding::Signed => (1.0, -1.0),
            Encoding::ZeroOne => (1.0, 0.0),
        };
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for i in 0..inner {
                let lane = self.lane(o * inner + i);
                for k in 0..len {
                    out[(o * len + k) * inner + i] = if lane.bit(k) { one } else { zero };
                }
            }
        }
        out
    }

    pub fn lane(&self, index: usize) -> Lane<'_> {
        Lane {
            words: &self.words[index * self.words_per_lane..][..self.words_per_lane],
            len: self.lane_len,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn num_lanes(&self) -> usize {
        self.words.len() / self.words_per_lane
    }

    pub fn lane_len(&self) -> usize {
        self.lane_len
    }

    pub fn words_per_lane(&self) -> usize {
        self.words_per_lane
    }

    /// Meaningful bits in the final word of each lane (1..=64).
    pub fn valid_bits(&self) -> u32 {
        match self.lane_len % 64 {
            0 => 64,
            r => r as u32,
        }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Raw word access. Kernels ignore padding bits, so writes there are
    /// harmless; writes elsewhere change the tensor.
    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    /// Number of packed bits that carry data.
    pub fn data_bits(&self) -> usize {
        self.num_lanes() * self.lane_len
    }
}
