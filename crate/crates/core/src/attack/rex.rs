use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AttackError, Result};
use crate::models::{ArchSpec, Dense, GeneratorModel, Mlp};
use crate::rng::Stream;
use crate::tensor::{Adam, Gradients, Tensor};

/// Widths added to a contiguous run of layers.
///
/// Layers `start ..= start + span` are expanded; `widths[t]` is the width
/// added to the input of layer `start + t` (so `widths[0]` and
/// `widths[span + 1]` must be zero: the expanded run keeps the original
/// input and output widths).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub start: usize,
    pub widths: Vec<usize>,
}

impl ExpansionPlan {
    pub fn span(&self) -> usize {
        self.widths.len().saturating_sub(2)
    }

    /// Doubles every internal width of `arch`.
    pub fn doubling(arch: &ArchSpec) -> Self {
        let k = arch.dims.len();
        let mut widths = vec![0];
        widths.extend(&arch.dims[1..k - 1]);
        widths.push(0);
        Self { start: 0, widths }
    }

    fn check(&self, layers: usize) -> Result<()> {
        let bad = |m: String| Err(AttackError::PlanShapeMismatch(m));
        if self.widths.len() < 3 {
            return bad("a plan needs at least one interior width".into());
        }
        if self.widths[0] != 0 || *self.widths.last().unwrap() != 0 {
            return bad("boundary widths must be zero".into());
        }
        if self.widths[1..self.widths.len() - 1].contains(&0) {
            return bad("interior widths must be positive".into());
        }
        if self.start + self.span() >= layers {
            return bad(format!(
                "layers {}..={} exceed a {layers}-layer network",
                self.start,
                self.start + self.span()
            ));
        }
        Ok(())
    }
}

/// A generator with expanded layers. The original parameters θ sit in the
/// top-left blocks and are never updated; only θ* is trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedGenerator {
    pub base: GeneratorModel,
    pub plan: ExpansionPlan,
    /// Expanded network as shipped (last expanded bias is `b + b*`).
    pub net: Mlp,
    /// `b*` of the last expanded layer.
    pub bias_star: Vec<f64>,
    /// 1.0 marks trainable entries; `None` for untouched layers.
    weight_masks: Vec<Option<Vec<f64>>>,
    bias_masks: Vec<Option<Vec<f64>>>,
}

fn block_init(rng: &mut Stream, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; rows * cols];
    }
    let std = scale * (2.0 / (rows + cols) as f64).sqrt();
    let n = Normal::new(0.0, std).expect("positive std");
    (0..rows * cols).map(|_| n.sample(rng)).collect()
}

/// Expands `g` according to `plan`. The final concatenated block and `b*`
/// start at zero, so the expanded generator reproduces `g` exactly; earlier
/// new blocks are drawn with std `init_scale · sqrt(2 / (fan_in + fan_out))`.
pub fn rex_expand(
    g: &GeneratorModel,
    plan: &ExpansionPlan,
    init_scale: f64,
    rng: &mut Stream,
) -> Result<ExpandedGenerator> {
    let layers = &g.net.layers;
    plan.check(layers.len())?;
    let last = plan.start + plan.span();
    let mut out = Vec::with_capacity(layers.len());
    let mut weight_masks = Vec::with_capacity(layers.len());
    let mut bias_masks = Vec::with_capacity(layers.len());
    for (j, layer) in layers.iter().enumerate() {
        if j < plan.start || j > last {
            out.push(layer.clone());
            weight_masks.push(None);
            bias_masks.push(None);
            continue;
        }
        let t = j - plan.start;
        let (li, lo) = (plan.widths[t], plan.widths[t + 1]);
        let (ki, ko) = (layer.input_dim(), layer.output_dim());
        let (ci, co) = (ki + li, ko + lo);
        let mut w = vec![0.0; co * ci];
        let mut wm = vec![0.0; co * ci];
        for r in 0..ko {
            w[r * ci..r * ci + ki].copy_from_slice(&layer.weight.data()[r * ki..(r + 1) * ki]);
        }
        let mut b = vec![0.0; co];
        b[..ko].copy_from_slice(layer.bias.data());
        let mut bm = vec![0.0; co];
        if lo > 0 {
            // new rows: stacked below (first layer) or block-diagonal
            let (c0, cols) = if li == 0 { (0, ki) } else { (ki, li) };
            let block = block_init(rng, lo, cols, init_scale);
            for r in 0..lo {
                let row = (ko + r) * ci;
                w[row + c0..row + c0 + cols].copy_from_slice(&block[r * cols..(r + 1) * cols]);
                wm[row + c0..row + c0 + cols].iter_mut().for_each(|m| *m = 1.0);
                bm[ko + r] = 1.0;
            }
        } else {
            // horizontal concat, zero so the output is unchanged
            for r in 0..ko {
                wm[r * ci + ki..(r + 1) * ci].iter_mut().for_each(|m| *m = 1.0);
            }
        }
        let dense = Dense::new(
            Tensor::matrix(co, ci, w).expect("sized"),
            Tensor::vector(b),
            layer.activation,
        )
        .expect("consistent");
        out.push(Dense { mask: layer.mask.clone().map(|m| pad_mask(m, co)), ..dense });
        weight_masks.push(Some(wm));
        bias_masks.push(Some(bm));
    }
    let net = Mlp::new(out).map_err(|e| AttackError::PlanShapeMismatch(e.to_string()))?;
    let out_dim = net.layers[last].output_dim();
    Ok(ExpandedGenerator {
        base: g.clone(),
        plan: plan.clone(),
        net,
        bias_star: vec![0.0; out_dim],
        weight_masks,
        bias_masks,
    })
}

fn pad_mask(mut m: Vec<f64>, len: usize) -> Vec<f64> {
    m.resize(len, 1.0);
    m
}

impl ExpandedGenerator {
    pub fn generator(&self) -> GeneratorModel {
        GeneratorModel { net: self.net.clone() }
    }

    pub fn last_expanded(&self) -> usize {
        self.plan.start + self.plan.span()
    }

    /// Number of trainable θ* entries.
    pub fn new_param_count(&self) -> usize {
        let count = |m: &Vec<Option<Vec<f64>>>| -> usize {
            m.iter().flatten().map(|v| v.iter().filter(|&&x| x == 1.0).count()).sum()
        };
        count(&self.weight_masks) + count(&self.bias_masks) + self.bias_star.len()
    }

    /// Whether every original parameter is bit-identical to `original`.
    pub fn preserves(&self, original: &GeneratorModel) -> bool {
        let last = self.last_expanded();
        self.net.layers.iter().zip(&original.net.layers).enumerate().all(|(j, (e, o))| {
            let (ki, ko) = (o.input_dim(), o.output_dim());
            let ci = e.input_dim();
            let weights = (0..ko).all(|r| {
                e.weight.data()[r * ci..r * ci + ki]
                    .iter()
                    .zip(&o.weight.data()[r * ki..(r + 1) * ki])
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            });
            let bias = if j == last {
                self.base.net.layers[j].bias == o.bias
            } else {
                e.bias.data()[..ko].iter().zip(o.bias.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            };
            weights && bias
        })
    }

    /// Masked Adam step on θ*; gradients are keyed by `"{prefix}.w{j}"`.
    pub(crate) fn apply_adam(&mut self, prefix: &str, adam: &mut Adam, grads: &Gradients) -> Result<()> {
        let last = self.last_expanded();
        let mut masked = Gradients::default();
        for (j, (wm, bm)) in self.weight_masks.iter().zip(&self.bias_masks).enumerate() {
            let (Some(wm), Some(bm)) = (wm, bm) else { continue };
            let wn = Mlp::weight_name(prefix, j);
            let bn = Mlp::bias_name(prefix, j);
            if let Some(gw) = grads.get(&wn) {
                let data = gw.data().iter().zip(wm).map(|(g, m)| g * m).collect();
                masked.insert(wn, Tensor::new(gw.shape().to_vec(), data)?);
            }
            if let Some(gb) = grads.get(&bn) {
                if j == last {
                    masked.insert("rex.bstar", gb.clone());
                } else {
                    let data = gb.data().iter().zip(bm).map(|(g, m)| g * m).collect();
                    masked.insert(bn, Tensor::new(gb.shape().to_vec(), data)?);
                }
            }
        }
        let mut bstar = Tensor::vector(std::mem::take(&mut self.bias_star));
        let mut params: Vec<(String, &mut Tensor)> = Vec::new();
        for (j, l) in self.net.layers.iter_mut().enumerate() {
            if self.weight_masks[j].is_some() {
                params.push((Mlp::weight_name(prefix, j), &mut l.weight));
                if j != last {
                    params.push((Mlp::bias_name(prefix, j), &mut l.bias));
                }
            }
        }
        params.push(("rex.bstar".to_string(), &mut bstar));
        adam.update(params, &masked)?;
        self.bias_star = bstar.into_data();
        let base = self.base.net.layers[last].bias.data();
        let merged: Vec<f64> = base.iter().zip(&self.bias_star).map(|(b, s)| b + s).collect();
        self.net.layers[last].bias = Tensor::vector(merged);
        Ok(())
    }
}
