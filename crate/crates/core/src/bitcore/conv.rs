use super::tensor::{tail_mask, BitTensor, Encoding};
use crate::{Error, Result};

/// Value assumed for spatial padding of ±1 activations.
///
/// `{0,1}` activations always pad with zero, which contributes nothing to a
/// dot product, so this setting only affects [`Encoding::Signed`] inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PadValue {
    /// Pad with -1 (bit 0).
    #[default]
    MinusOne,
    /// Pad with +1 (bit 1).
    PlusOne,
    /// Padded taps are excluded from the dot product.
    ZeroSkip,
}

impl PadValue {
    /// Numeric value of a padded ±1 activation.
    pub fn as_real(self) -> f64 {
        match self {
            PadValue::MinusOne => -1.0,
            PadValue::PlusOne => 1.0,
            PadValue::ZeroSkip => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub pad_value: PadValue,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry::new(1, 0, 1)
    }
}

/// Output extent along one axis, or `None` if the kernel does not fit.
pub fn output_len(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    if stride == 0 || dilation == 0 || kernel == 0 {
        return None;
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

impl ConvGeometry {
    /// Square stride/padding/dilation with -1 padding.
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
            pad_value: PadValue::MinusOne,
        }
    }

    pub fn with_pad_value(mut self, pad_value: PadValue) -> Self {
        self.pad_value = pad_value;
        self
    }

    /// Output `(h, w)` for an `(h, w)` input and `(kh, kw)` kernel.
    pub fn output_hw(&self, input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        let oh = output_len(input.0, kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let ow = output_len(input.1, kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (oh, ow) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::Geometry(format!(
                "input {input:?}, kernel {kernel:?}, {self:?} gives no output"
            ))),
        }
    }
}

/// Integer-valued convolution output, `N,C,H,W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Clone, Debug)]
enum Masks {
    /// One mask for every row, with a fixed number of live bits.
    Shared { mask: Vec<u64>, live: i32 },
    /// Zero-skip padding: each row has its own mask and live count.
    PerRow { masks: Vec<u64>, live: Vec<i32> },
}

/// im2col result: one packed row per output pixel, each row the
/// concatenation of the `Kh*Kw` tap lanes of the receptive field.
#[derive(Clone, Debug)]
pub struct PackedColumns {
    batch: usize,
    out_hw: (usize, usize),
    kernel: (usize, usize),
    channels: usize,
    encoding: Encoding,
    lane_words: usize,
    words: Vec<u64>,
    masks: Masks,
}

impl PackedColumns {
    pub fn rows(&self) -> usize {
        self.batch * self.out_hw.0 * self.out_hw.1
    }

    pub fn lane_words(&self) -> usize {
        self.lane_words
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    /// Bytes held by the packed rows (masks excluded).
    pub fn byte_len(&self) -> usize {
        self.words.len() * 8
    }
}

fn check_activation(input: &BitTensor) -> Result<()> {
    if input.shape().len() != 4 || input.axis() != 1 {
        return Err(Error::invalid(format!(
            "activation must be N,C,H,W packed on axis 1 (got shape {:?}, axis {})",
            input.shape(),
            input.axis()
        )));
    }
    Ok(())
}

/// Unrolls the receptive fields of a packed `N,C,H,W` activation.
pub fn im2col(input: &BitTensor, kernel: (usize, usize), geom: &ConvGeometry) -> Result<PackedColumns> {
    check_activation(input)?;
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (oh, ow) = geom.output_hw((h, w), kernel)?;
    let wpl = input.words_per_lane();
    let taps = kernel.0 * kernel.1;
    let lane_words = taps * wpl;
    let rows = n * oh * ow;
    let encoding = input.encoding();
    let zero_skip = encoding == Encoding::Signed && geom.pad_value == PadValue::ZeroSkip;
    let pad_ones = encoding == Encoding::Signed && geom.pad_value == PadValue::PlusOne;

    let mut tap_mask = vec![u64::MAX; wpl];
    tap_mask[wpl - 1] = tail_mask(c);
    let mut words = vec![0u64; rows * lane_words];
    let mut row_masks = if zero_skip { vec![0u64; rows * lane_words] } else { Vec::new() };
    let mut row_live = if zero_skip { vec![0i32; rows] } else { Vec::new() };
    let src = input.words();

    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (b * oh + oy) * ow + ox;
                let row = &mut words[r * lane_words..][..lane_words];
                let mut live = 0;
                for ky in 0..kernel.0 {
                    let iy = (oy * geom.stride.0 + ky * geom.dilation.0) as isize - geom.padding.0 as isize;
                    for kx in 0..kernel.1 {
                        let ix = (ox * geom.stride.1 + kx * geom.dilation.1) as isize - geom.padding.1 as isize;
                        let t = ky * kernel.1 + kx;
                        let dst = &mut row[t * wpl..][..wpl];
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        if inside {
                            let lane = (b * h + iy as usize) * w + ix as usize;
                            dst.copy_from_slice(&src[lane * wpl..][..wpl]);
                        } else if pad_ones {
                            dst.copy_from_slice(&tap_mask);
                        }
                        if zero_skip && inside {
                            row_masks[r * lane_words + t * wpl..][..wpl].copy_from_slice(&tap_mask);
                            live += c as i32;
                        }
                    }
                }
                if zero_skip {
                    row_live[r] = live;
                }
            }
        }
    }

    let masks = if zero_skip {
        Masks::PerRow {
            masks: row_masks,
            live: row_live,
        }
    } else {
        Masks::Shared {
            mask: tap_mask.repeat(taps),
            live: (taps * c) as i32,
        }
    };
    Ok(PackedColumns {
        batch: n,
        out_hw: (oh, ow),
        kernel,
        channels: c,
        encoding,
        lane_words,
        words,
        masks,
    })
}

/// Packs an `O,I,Kh,Kw` real filter bank as signs along the input-channel axis.
pub fn pack_filters(weights: &[f64], shape: [usize; 4]) -> Result<BitTensor> {
    BitTensor::pack_signs(weights, &shape, 1)
}

fn check_filters(cols: &PackedColumns, filters: &BitTensor) -> Result<usize> {
    let s = filters.shape();
    if s.len() != 4 || filters.axis() != 1 || filters.encoding() != Encoding::Signed {
        return Err(Error::invalid("filters must be signed O,I,Kh,Kw packed on axis 1"));
    }
    if s[1] != cols.channels || (s[2], s[3]) != cols.kernel {
        return Err(Error::shape(
            "binary conv filters",
            &[s[0], cols.channels, cols.kernel.0, cols.kernel.1],
            s,
        ));
    }
    Ok(s[0])
}

/// XNOR-popcount GEMM of im2col rows against packed filters, `N,O,H,W` out.
pub fn packed_gemm(cols: &PackedColumns, filters: &BitTensor) -> Result<IntTensor> {
    let cout = check_filters(cols, filters)?;
    let (oh, ow) = cols.out_hw;
    let mut out = vec![0i32; cols.batch * cout * oh * ow];
    gemm_dispatch(cols, filters.words(), cout, &mut out);
    Ok(IntTensor {
        shape: vec![cols.batch, cout, oh, ow],
        data: out,
    })
}

fn gemm_dispatch(cols: &PackedColumns, filters: &[u64], cout: usize, out: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the popcnt feature was detected at runtime.
            unsafe { gemm_popcnt(cols, filters, cout, out) };
            return;
        }
    }
    gemm_body(cols, filters, cout, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn gemm_popcnt(cols: &PackedColumns, filters: &[u64], cout: usize, out: &mut [i32]) {
    gemm_body(cols, filters, cout, out)
}

#[inline(always)]
fn gemm_body(cols: &PackedColumns, filters: &[u64], cout: usize, out: &mut [i32]) {
    let lw = cols.lane_words;
    let hw = cols.out_hw.0 * cols.out_hw.1;
    for r in 0..cols.rows() {
        let a = &cols.words[r * lw..][..lw];
        let (mask, live) = match &cols.masks {
            Masks::Shared { mask, live } => (&mask[..], *live),
            Masks::PerRow { masks, live } => (&masks[r * lw..][..lw], live[r]),
        };
        let (b, p) = (r / hw, r % hw);
        let base = b * cout * hw + p;
        match cols.encoding {
            Encoding::Signed => {
                for co in 0..cout {
                    let wt = &filters[co * lw..][..lw];
                    let mut diff = 0u32;
                    for k in 0..lw {
                        diff += ((a[k] ^ wt[k]) & mask[k]).count_ones();
                    }
                    out[base + co * hw] = live - 2 * diff as i32;
                }
            }
            Encoding::ZeroOne => {
                let mut ones = 0u32;
                for k in 0..lw {
                    ones += (a[k] & mask[k]).count_ones();
                }
                for co in 0..cout {
                    let wt = &filters[co * lw..][..lw];
                    let mut both = 0u32;
                    for k in 0..lw {
                        both += (a[k] & wt[k] & mask[k]).count_ones();
                    }
                    out[base + co * hw] = 2 * both as i32 - ones as i32;
                }
            }
        }
    }
}

/// Binary convolution by im2col + XNOR-popcount GEMM.
///
/// The result equals, as exact integers, a dense convolution of the decoded
/// input and filter values with padding per `geom.pad_value`.
pub fn binary_conv2d(input: &BitTensor, weight: &BitTensor, geom: &ConvGeometry) -> Result<IntTensor> {
    check_activation(input)?;
    let ws = weight.shape();
    if ws.len() != 4 {
        return Err(Error::invalid("filters must be rank 4"));
    }
    if ws[1] != input.shape()[1] {
        return Err(Error::shape(
            "binary conv input channels",
            &[ws[1]],
            &[input.shape()[1]],
        ));
    }
    let cols = im2col(input, (ws[2], ws[3]), geom)?;
    packed_gemm(&cols, weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct dense convolution over decoded values; independent of im2col.
    fn dense_conv(
        x: &[f64],
        xs: [usize; 4],
        w: &[f64],
        ws: [usize; 4],
        g: &ConvGeometry,
        pad: f64,
    ) -> Vec<f64> {
        let (oh, ow) = g.output_hw((xs[2], xs[3]), (ws[2], ws[3])).unwrap();
        let mut out = vec![0.0; xs[0] * ws[0] * oh * ow];
        for n in 0..xs[0] {
            for o in 0..ws[0] {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..xs[1] {
                            for ky in 0..ws[2] {
                                for kx in 0..ws[3] {
                                    let iy = (y * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                                    let ix = (xx * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                                    let v = if iy < 0 || ix < 0 || iy as usize >= xs[2] || ix as usize >= xs[3] {
                                        pad
                                    } else {
                                        x[((n * xs[1] + c) * xs[2] + iy as usize) * xs[3] + ix as usize]
                                    };
                                    acc += v * w[((o * ws[1] + c) * ws[2] + ky) * ws[3] + kx];
                                }
                            }
                        }
                        out[((n * ws[0] + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn all_plus_one_2x2() {
        let x = BitTensor::pack_signs(&[1.0; 4], &[1, 1, 2, 2], 1).unwrap();
        let w = pack_filters(&[1.0; 4], [1, 1, 2, 2]).unwrap();
        let out = binary_conv2d(&x, &w, &ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!(out.data, vec![4]);
    }

    #[test]
    fn checkerboard_cancels() {
        let x = BitTensor::pack_signs(&[1.0, -1.0, -1.0, 1.0], &[1, 1, 2, 2], 1).unwrap();
        let w = pack_filters(&[1.0; 4], [1, 1, 2, 2]).unwrap();
        let out = binary_conv2d(&x, &w, &ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!(out.data, vec![0]);
    }

    #[test]
    fn random_16ch_pad1_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs = [1, 16, 8, 8];
        let ws = [4, 16, 3, 3];
        let x = signs(&mut rng, xs.iter().product());
        let w = signs(&mut rng, ws.iter().product());
        let g = ConvGeometry::new(1, 1, 1);
        let out = binary_conv2d(
            &BitTensor::pack_signs(&x, &xs, 1).unwrap(),
            &pack_filters(&w, ws).unwrap(),
            &g,
        )
        .unwrap();
        assert_eq!(out.shape, vec![1, 4, 8, 8]);
        assert_eq!(out.to_f64(), dense_conv(&x, xs, &w, ws, &g, -1.0));
    }

    #[test]
    fn pad_modes_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = [2, 70, 5, 6];
        let ws = [3, 70, 3, 3];
        let x = signs(&mut rng, xs.iter().product());
        let w = signs(&mut rng, ws.iter().product());
        for pv in [PadValue::MinusOne, PadValue::PlusOne, PadValue::ZeroSkip] {
            let g = ConvGeometry::new(2, 2, 2).with_pad_value(pv);
            let out = binary_conv2d(
                &BitTensor::pack_signs(&x, &xs, 1).unwrap(),
                &pack_filters(&w, ws).unwrap(),
                &g,
            )
            .unwrap();
            assert_eq!(out.to_f64(), dense_conv(&x, xs, &w, ws, &g, pv.as_real()), "{pv:?}");
        }
    }

    #[test]
    fn zero_one_activations_pad_with_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs = [1, 20, 7, 7];
        let ws = [5, 20, 3, 3];
        let x: Vec<f64> = (0..xs.iter().product()).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
        let w = signs(&mut rng, ws.iter().product());
        // Large rate: most taps land in padding.
        let g = ConvGeometry::new(1, 6, 6).with_pad_value(PadValue::PlusOne);
        let out = binary_conv2d(
            &BitTensor::pack_zero_one(&x, &xs, 1).unwrap(),
            &pack_filters(&w, ws).unwrap(),
            &g,
        )
        .unwrap();
        assert_eq!(out.to_f64(), dense_conv(&x, xs, &w, ws, &g, 0.0));
    }

    #[test]
    fn non_positive_extent_is_error() {
        let x = BitTensor::pack_signs(&[1.0; 4], &[1, 1, 2, 2], 1).unwrap();
        let w = pack_filters(&[1.0; 9], [1, 1, 3, 3]).unwrap();
        assert!(matches!(
            binary_conv2d(&x, &w, &ConvGeometry::new(1, 0, 1)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = BitTensor::pack_signs(&[1.0; 8], &[1, 2, 2, 2], 1).unwrap();
        let w = pack_filters(&[1.0; 3], [1, 3, 1, 1]).unwrap();
        assert!(binary_conv2d(&x, &w, &ConvGeometry::default()).is_err());
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(output_len(28, 3, 1, 1, 1), Some(28));
        assert_eq!(output_len(32, 3, 2, 1, 1), Some(16));
        assert_eq!(output_len(8, 3, 1, 2, 2), Some(8));
        assert_eq!(output_len(2, 3, 1, 0, 1), None);
    }
}
