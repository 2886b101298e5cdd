use rand::{Rng, RngCore};

use super::{Layer, Network, TaskId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Widening of the top dense layers of the upper trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpansionSpec {
    pub nodes_per_layer: usize,
    pub layers_from_top: usize,
}

/// Adds `nodes_per_layer` units to each of the top `layers_from_top` dense
/// layers of the upper trunk.
///
/// Each new unit copies the incoming weights and bias of a randomly chosen
/// original unit of the same layer; its incoming weights from new units of
/// the layer below copy the corresponding original weights too. Weights
/// from new units into original units are zero. In the heads, rows for the
/// new top units are Xavier-random for `new_task` and zero for every other
/// head, so all other heads compute exactly what they did before.
///
/// The new entries of each widened trunk parameter are recorded as its
/// expansion mask.
pub fn expand_network<S: Scalar>(
    net: &mut Network<S>,
    spec: &ExpansionSpec,
    new_task: &TaskId,
    rng: &mut dyn RngCore,
) -> Result<()> {
    if spec.nodes_per_layer == 0 || spec.layers_from_top == 0 {
        return Err(Error::invalid(
            "expansion needs at least one node and one layer",
        ));
    }
    net.head(new_task)?;
    let dense: Vec<usize> = net
        .trunk_upper
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_dense())
        .map(|(i, _)| i)
        .collect();
    if dense.is_empty() {
        return Err(Error::invalid(
            "cannot expand a network without upper trunk layers",
        ));
    }
    if spec.layers_from_top > dense.len() {
        return Err(Error::invalid(format!(
            "cannot expand {} layers; the upper trunk has {}",
            spec.layers_from_top,
            dense.len()
        )));
    }
    let n = spec.nodes_per_layer;
    let mut prev_src: Vec<usize> = Vec::new();
    for &idx in &dense[dense.len() - spec.layers_from_top..] {
        let Layer::Dense { weight, bias } = &mut net.trunk_upper[idx] else {
            unreachable!("index selected from dense layers");
        };
        let (rows, cols) = (weight.value().shape()[0], weight.value().shape()[1]);
        let src: Vec<usize> = (0..n).map(|_| rng.random_range(0..cols)).collect();
        let (new_rows, new_cols) = (rows + prev_src.len(), cols + n);
        let old_w = weight.value().data();
        let old_mask = net.expansion_masks.get(&weight.id());
        let mut w = vec![S::zero(); new_rows * new_cols];
        let mut mask = vec![false; new_rows * new_cols];
        for r in 0..new_rows {
            // row in the original matrix that this input unit reads from
            let from = if r < rows { r } else { prev_src[r - rows] };
            for c in 0..new_cols {
                let at = r * new_cols + c;
                if c < cols {
                    if r < rows {
                        w[at] = old_w[r * cols + c];
                        mask[at] = old_mask.is_some_and(|m| m[r * cols + c]);
                    }
                } else {
                    w[at] = old_w[from * cols + src[c - cols]];
                    mask[at] = true;
                }
            }
        }
        let wid = weight.id();
        weight.replace_value(Tensor::new(vec![new_rows, new_cols], w)?);
        net.expansion_masks.insert(wid, mask);

        let old_b = bias.value().data().to_vec();
        let old_bmask = net.expansion_masks.get(&bias.id()).cloned();
        let mut b = old_b.clone();
        b.extend(src.iter().map(|&s| old_b[s]));
        let mut bmask = old_bmask.unwrap_or_else(|| vec![false; cols]);
        bmask.extend(std::iter::repeat_n(true, n));
        let bid = bias.id();
        bias.replace_value(Tensor::vector(&b));
        net.expansion_masks.insert(bid, bmask);
        prev_src = src;
    }

    for head in &mut net.heads {
        let is_new = &head.task == new_task;
        let Some(Layer::Dense { weight, .. }) = head.layers.iter_mut().find(|l| l.is_dense())
        else {
            continue;
        };
        let (rows, cols) = (weight.value().shape()[0], weight.value().shape()[1]);
        let mut w = weight.value().data().to_vec();
        if is_new {
            let fresh = super::xavier_uniform::<S>(&[n, cols], rows + n, cols, rng);
            w.extend_from_slice(fresh.data());
        } else {
            w.extend(std::iter::repeat_n(S::zero(), n * cols));
        }
        weight.replace_value(Tensor::new(vec![rows + n, cols], w)?);
    }
    Ok(())
}
