use std::collections::HashMap;

use super::model::{LayerTrace, Model, Precision, Routing};
use crate::Result;

/// Per-sample operation and storage counts.
///
/// `fixed_point_adds` counts high-precision additions that exist only
/// because of decomposition and skips: the residual add of every unit, the
/// averaging of parallel branches, the fusion of base outputs and the two
/// paths of every soft gate. Parameter bits cover conv and fully-connected
/// weights only.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    /// XNOR-popcount multiply-accumulates (active bases only).
    pub binary_ops: u64,
    /// Binary MACs inside group bodies.
    pub group_body_binary_ops: u64,
    pub int8_macs: u64,
    pub float_macs: u64,
    pub fixed_point_adds: u64,
    pub param_bits: u64,
    /// Bits of a float network with one base and the same topology.
    pub float_param_bits: u64,
    pub memory_saving: f64,
}

fn scaled(v: u64, (num, den): (usize, usize)) -> u64 {
    v * num as u64 / den as u64
}

fn bits_per_weight(p: Precision) -> u64 {
    match p {
        Precision::Binary => 1,
        Precision::Int8 => 8,
        Precision::Float => 32,
    }
}

pub fn complexity_report(model: &Model) -> Result<ComplexityReport> {
    let trace = model.layer_trace()?;
    let mut r = ComplexityReport {
        binary_ops: 0,
        group_body_binary_ops: 0,
        int8_macs: 0,
        float_macs: 0,
        fixed_point_adds: 0,
        param_bits: 0,
        float_param_bits: 0,
        memory_saving: 0.0,
    };
    for t in &trace {
        let macs = scaled(t.macs(), t.active);
        match t.precision {
            Precision::Binary => {
                r.binary_ops += macs;
                if t.group.is_some() {
                    r.group_body_binary_ops += macs;
                }
            }
            Precision::Int8 => r.int8_macs += macs,
            Precision::Float => r.float_macs += macs,
        }
        r.param_bits += t.weights() * bits_per_weight(t.precision);
        if t.base == 0 && t.branch == 0 {
            r.float_param_bits += t.weights() * 32;
        }
    }
    r.fixed_point_adds = fixed_point_adds(model, &trace);
    r.memory_saving = r.float_param_bits as f64 / r.param_bits as f64;
    Ok(r)
}

fn fixed_point_adds(model: &Model, trace: &[LayerTrace]) -> u64 {
    let by_name: HashMap<&str, &LayerTrace> = trace.iter().map(|t| (t.name.as_str(), t)).collect();
    let elems = |name: &str| by_name[name].out_elems();
    let mut adds = 0;
    for g in &model.groups {
        let k = g.bases.len() as u64;
        let (active, frac) = match &g.routing {
            Routing::Hard(h) => (h.n_select as u64, (h.n_select, g.bases.len())),
            _ => (k, (1, 1)),
        };
        for base in &g.bases {
            for blk in &base.blocks {
                for u in &blk.units {
                    // branch averaging plus the residual add
                    let e = elems(u.convs[0].name());
                    adds += scaled(e * u.convs.len() as u64, frac);
                }
            }
        }
        let block_out = |n: usize| elems(g.bases[0].blocks[n].units.last().unwrap().convs[0].name());
        let depth = g.bases[0].blocks.len();
        adds += (active - 1) * block_out(depth - 1);
        if let Routing::Soft { gates, .. } = &g.routing {
            for n in 0..gates.len() {
                // cross-base sum, then one blend add per base
                adds += (2 * k - 1) * block_out(n);
            }
        }
    }
    adds
}

/// Binary MACs of a `bits`-bit fixed-point network of the same topology:
/// every single-base MAC costs `bits^2` binary dot products.
pub fn fixed_point_binary_ops(model: &Model, bits: u32) -> Result<u64> {
    let per_base: u64 = model
        .layer_trace()?
        .iter()
        .filter(|t| t.precision == Precision::Binary && t.base == 0 && t.branch == 0)
        .map(LayerTrace::macs)
        .sum();
    Ok(per_base * u64::from(bits * bits))
}
