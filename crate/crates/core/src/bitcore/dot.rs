use super::tensor::{tail_mask, Lane};
use crate::{Error, Result};

/// Exact ±1 inner product of two lanes: `2 * popcount(xnor(a, b)) - m`,
/// with bits past `m` masked out.
pub fn xnor_popcount_dot(a: Lane<'_>, b: Lane<'_>) -> Result<i32> {
    if a.len != b.len {
        return Err(Error::LengthMismatch {
            left: a.len,
            right: b.len,
        });
    }
    let m = a.len;
    let nw = m.div_ceil(64);
    if a.words.len() < nw || b.words.len() < nw {
        return Err(Error::invalid("lane shorter than its declared length"));
    }
    if m == 0 {
        return Ok(0);
    }
    let mut same = 0u32;
    for w in 0..nw - 1 {
        same += (!(a.words[w] ^ b.words[w])).count_ones();
    }
    same += (!(a.words[nw - 1] ^ b.words[nw - 1]) & tail_mask(m)).count_ones();
    Ok(2 * same as i32 - m as i32)
}

/// `{0,1}` activations against ±1 weights: `sum a_i * w_i`.
///
/// With `a_i` in `{0,1}` and `w_i = 2 * wbit_i - 1`, the sum over the set bits
/// of `a` is `2 * popcount(a & wbits) - popcount(a)`.
pub fn and_popcount_dot(a: Lane<'_>, w: Lane<'_>) -> Result<i32> {
    if a.len != w.len {
        return Err(Error::LengthMismatch {
            left: a.len,
            right: w.len,
        });
    }
    let nw = a.len.div_ceil(64);
    let (mut both, mut ones) = (0u32, 0u32);
    for i in 0..nw {
        let mask = if i + 1 == nw { tail_mask(a.len) } else { u64::MAX };
        let av = a.words[i] & mask;
        both += (av & w.words[i]).count_ones();
        ones += av.count_ones();
    }
    Ok(2 * both as i32 - ones as i32)
}

/// Inner product of two `P`-bit fixed-point vectors given as ±1 bit-planes,
/// where plane `i` carries weight `2^i`:
/// `sum_i sum_j 2^(i+j) * (w_i . a_j)`. Costs `P^2` lane dot products.
pub fn fixed_point_dot(w_bases: &[Lane<'_>], a_bases: &[Lane<'_>]) -> Result<i64> {
    if w_bases.is_empty() || a_bases.is_empty() {
        return Err(Error::invalid("fixed-point dot needs at least one basis"));
    }
    if w_bases.len() != a_bases.len() {
        return Err(Error::LengthMismatch {
            left: w_bases.len(),
            right: a_bases.len(),
        });
    }
    let mut acc = 0i64;
    for (i, wb) in w_bases.iter().enumerate() {
        for (j, ab) in a_bases.iter().enumerate() {
            acc += (1i64 << (i + j)) * i64::from(xnor_popcount_dot(*wb, *ab)?);
        }
    }
    Ok(acc)
}
