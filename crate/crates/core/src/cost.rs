//! Multiply-add accounting per exit.
//!
//! `IC^l = Σ_{k<=l} (layer_k + im_k + gate_k)`, normalised by `IC^L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mul-Adds spent on the uncertainty statistics feeding a gate, chosen so
/// that a gate on 10 classes totals 96 with its 4-weight dot product.
pub const DEFAULT_GATE_FEATURE_OPS: u64 = 92;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCostTable")]
pub struct CostTable {
    pub layer_cost: Vec<u64>,
    pub im_cost: Vec<u64>,
    pub gate_cost: Vec<u64>,
    pub ic: Vec<u64>,
    pub ic_norm: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCostTable {
    layer_cost: Vec<u64>,
    im_cost: Vec<u64>,
    gate_cost: Vec<u64>,
    #[serde(default)]
    ic: Option<Vec<u64>>,
    #[serde(default)]
    #[allow(dead_code)]
    ic_norm: Option<Vec<f64>>,
}

impl TryFrom<RawCostTable> for CostTable {
    type Error = Error;

    fn try_from(raw: RawCostTable) -> Result<Self> {
        let table = build_cost_table(&raw.layer_cost, &raw.im_cost, &raw.gate_cost)?;
        if let Some(ic) = raw.ic {
            if ic != table.ic {
                return Err(Error::Config(
                    "stored ic disagrees with per-layer costs".into(),
                ));
            }
        }
        Ok(table)
    }
}

pub fn build_cost_table(
    layer_cost: &[u64],
    im_cost: &[u64],
    gate_cost: &[u64],
) -> Result<CostTable> {
    let l = layer_cost.len();
    if l == 0 {
        return Err(Error::Config("cost table needs at least one layer".into()));
    }
    if im_cost.len() != l || gate_cost.len() != l {
        return Err(Error::Config(format!(
            "cost vectors have lengths {}/{}/{}, expected {l}",
            l,
            im_cost.len(),
            gate_cost.len()
        )));
    }
    let mut ic = Vec::with_capacity(l);
    let mut total = 0u64;
    for k in 0..l {
        let step = layer_cost[k] + im_cost[k] + gate_cost[k];
        if step == 0 {
            return Err(Error::Config(format!("exit {} adds zero cost", k + 1)));
        }
        total += step;
        ic.push(total);
    }
    let full = total as f64;
    let ic_norm = ic.iter().map(|&c| c as f64 / full).collect();
    Ok(CostTable {
        layer_cost: layer_cost.to_vec(),
        im_cost: im_cost.to_vec(),
        gate_cost: gate_cost.to_vec(),
        ic,
        ic_norm,
    })
}

/// Weight multiply-adds of a dense `in_dim -> out_dim` layer (bias adds excluded).
pub fn muladd_linear(in_dim: usize, out_dim: usize) -> Result<u64> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::invalid(format!(
            "linear layer {in_dim}x{out_dim} has a zero dimension"
        )));
    }
    Ok((in_dim * out_dim) as u64)
}

impl CostTable {
    pub fn layers(&self) -> usize {
        self.ic.len()
    }

    /// Table for the built-in branches: IM `d_l x K`, gate `4 + feature_ops`,
    /// none at the final exit.
    pub fn for_branches(
        layer_cost: &[u64],
        dims: &[usize],
        classes: usize,
        feature_ops: u64,
    ) -> Result<Self> {
        if dims.len() != layer_cost.len() {
            return Err(Error::Config(
                "dims and layer costs differ in length".into(),
            ));
        }
        let l = dims.len();
        let mut im = Vec::with_capacity(l);
        let mut gate = Vec::with_capacity(l);
        for (k, &d) in dims.iter().enumerate() {
            if k + 1 == l {
                im.push(0);
                gate.push(0);
            } else {
                im.push(muladd_linear(d, classes)?);
                gate.push(muladd_linear(crate::branches::GATE_FEATURES, 1)? + feature_ops);
            }
        }
        build_cost_table(layer_cost, &im, &gate)
    }

    /// Relative overhead of the branches at the final exit.
    pub fn overhead_ratio(&self) -> f64 {
        let extra: u64 = self.im_cost.iter().sum::<u64>() + self.gate_cost.iter().sum::<u64>();
        let base: u64 = self.layer_cost.iter().sum();
        extra as f64 / base as f64
    }

    fn check_exits(&self, exits: &[usize]) -> Result<()> {
        if exits.is_empty() {
            return Err(Error::invalid("average cost of an empty exit list"));
        }
        if let Some(&bad) = exits.iter().find(|&&l| l == 0 || l > self.layers()) {
            return Err(Error::invalid(format!(
                "exit layer {bad} outside 1..={}",
                self.layers()
            )));
        }
        Ok(())
    }

    /// Mean `IC^{l_i}` over 1-based exit layers.
    pub fn average_cost(&self, exits: &[usize]) -> Result<f64> {
        self.check_exits(exits)?;
        Ok(exits.iter().map(|&l| self.ic[l - 1] as f64).sum::<f64>() / exits.len() as f64)
    }

    pub fn average_cost_norm(&self, exits: &[usize]) -> Result<f64> {
        self.check_exits(exits)?;
        Ok(exits.iter().map(|&l| self.ic_norm[l - 1]).sum::<f64>() / exits.len() as f64)
    }
}

/// Per-layer Mul-Adds of a T2T-ViT-7 backbone on 10 classes (token dim 257),
/// with an IM and gate at each of the first six exits.
pub fn t2t_vit7_fixture() -> CostTable {
    let cumulative: [u64; 7] = [
        414_300_000,
        538_200_000,
        662_100_000,
        786_000_000,
        909_900_000,
        1_034_000_000,
        1_158_000_000,
    ];
    let mut layer = Vec::with_capacity(7);
    let mut prev = 0;
    for c in cumulative {
        layer.push(c - prev);
        prev = c;
    }
    CostTable::for_branches(&layer, &[257; 7], 10, DEFAULT_GATE_FEATURE_OPS).expect("valid fixture")
}
