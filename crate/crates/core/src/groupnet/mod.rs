//! Structure approximation: a float network approximated by K binary bases,
//! layer by layer or group by group, fused with soft or hard gates.

mod complexity;
mod decomposition;
pub mod gates;
mod model;
mod spec;

pub use complexity::{complexity_report, fixed_point_binary_ops, ComplexityReport};
pub use decomposition::{gbd_forward, lbd_forward, BinaryBranch};
pub(crate) use decomposition::average_branches;
pub use gates::{
    hard_gate_backward, hard_gate_forward, soft_gate_backward, soft_gate_forward, top_n, HardGate,
    HardGateCache, HardGateGrads, HardGateOutput, SoftGate,
};
pub use model::{
    Base, Block, ConvRole, Downsample, Group, Head, LayerTrace, Model, Precision, Routing, Stage, Tape, Unit,
};
pub use spec::{
    ActMode, BackboneSpec, Decomposition, Gating, GroupSpec, HeadSpec, ModelSpec, PrecisionExceptions, SecondPath,
    StageSpec, Variant, parse_pad_mode,
};

/// Builds one of the published variants; `bases` and `n_select` default
/// per variant when `None`.
pub fn build_variant(
    variant: Variant,
    backbone: BackboneSpec,
    bases: Option<usize>,
    n_select: Option<usize>,
) -> crate::Result<Model> {
    let (k, n) = variant.default_bases();
    Model::new(variant.spec(backbone, bases.unwrap_or(k), n_select.unwrap_or(n))?)
}
