use crate::{Error, Result};

/// Shape of one convolutional layer for the analytic speedup model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub c_in: usize,
    /// Kernel width and height.
    pub kernel: (usize, usize),
    /// Input width and height.
    pub input: (usize, usize),
    /// Output width and height.
    pub output: (usize, usize),
}

impl LayerDims {
    /// A square layer whose input and output share `spatial` extent.
    pub fn square(c_in: usize, kernel: usize, spatial: usize) -> Self {
        LayerDims {
            c_in,
            kernel: (kernel, kernel),
            input: (spatial, spatial),
            output: (spatial, spatial),
        }
    }
}

/// Analytic speedup of `bases` parallel binary convolutions over one float
/// convolution, assuming 64-wide XNOR/popcount and one full-precision
/// addition per output per base:
///
/// `64 c w h w_in h_in / (K (c w h w_in h_in + 64 w_out h_out))`
pub fn speedup_ratio(layer: &LayerDims, bases: usize) -> Result<f64> {
    if bases == 0 {
        return Err(Error::invalid("number of bases must be positive"));
    }
    let dims = [
        layer.c_in,
        layer.kernel.0,
        layer.kernel.1,
        layer.input.0,
        layer.input.1,
        layer.output.0,
        layer.output.1,
    ];
    if dims.contains(&0) {
        return Err(Error::invalid(format!("layer dimensions must be positive: {layer:?}")));
    }
    let work = (layer.c_in * layer.kernel.0 * layer.kernel.1 * layer.input.0 * layer.input.1) as f64;
    let adds = 64.0 * (layer.output.0 * layer.output.1) as f64;
    Ok(64.0 * work / (bases as f64 * (work + adds)))
}
