//! Inference-side building blocks of layer-wise and group-wise decomposition.

use super::model::Base;
use crate::bitcore::{binary_conv2d, pack_filters, BitTensor, ConvGeometry};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One packed binary convolution.
#[derive(Clone, Debug)]
pub struct BinaryBranch {
    pub filters: BitTensor,
    pub geom: ConvGeometry,
}

impl BinaryBranch {
    /// Packs `sign(w)` for `O,I,Kh,Kw` weights.
    pub fn from_weights(weights: &[f64], shape: [usize; 4], geom: ConvGeometry) -> Result<Self> {
        Ok(BinaryBranch {
            filters: pack_filters(weights, shape)?,
            geom,
        })
    }

    /// `conv(sign(x), sign(w))` as real values.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let bits = BitTensor::pack_signs(&x.data, &x.shape, 1)?;
        let y = binary_conv2d(&bits, &self.filters, &self.geom)?;
        Tensor::new(&y.shape, y.to_f64())
    }
}

/// Mean of branch outputs, which must all share one shape.
pub(crate) fn average_branches(x: &Tensor, branches: &[BinaryBranch]) -> Result<Tensor> {
    let (first, rest) = branches
        .split_first()
        .ok_or_else(|| Error::invalid("need at least one branch"))?;
    let mut acc = first.forward(x)?;
    for b in rest {
        let y = b.forward(x)?;
        acc.same_shape(&y, "branch outputs")?;
        acc.add_assign(&y);
    }
    Ok(acc.scaled(1.0 / branches.len() as f64))
}

/// Layer-wise decomposition: `(1/K) sum_i B_i(x)` over identically shaped
/// binary branches.
pub fn lbd_forward(x: &Tensor, branches: &[BinaryBranch]) -> Result<Tensor> {
    if let Some(b0) = branches.first() {
        let s0 = b0.filters.shape();
        if branches.iter().any(|b| b.filters.shape() != s0 || b.geom != b0.geom) {
            return Err(Error::invalid("layer-wise branches must share one geometry"));
        }
    }
    average_branches(x, branches)
}

/// Group-wise decomposition: `(1/K) sum_i H_i(x)`, each `H_i` a full block
/// stack run end to end in inference mode.
pub fn gbd_forward(x: &Tensor, bases: &mut [Base]) -> Result<Tensor> {
    if bases.is_empty() {
        return Err(Error::invalid("need at least one base"));
    }
    if bases.iter().any(|b| b.blocks.is_empty()) {
        return Err(Error::invalid("empty group"));
    }
    let k = bases.len();
    let mut acc: Option<Tensor> = None;
    for b in bases.iter_mut() {
        let y = b.forward(x)?;
        match acc.as_mut() {
            None => acc = Some(y),
            Some(a) => {
                a.same_shape(&y, "base outputs")?;
                a.add_assign(&y);
            }
        }
    }
    Ok(acc.unwrap().scaled(1.0 / k as f64))
}
