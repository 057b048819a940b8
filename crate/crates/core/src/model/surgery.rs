//! Widening and pruning of the expandable convolutions.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ExpandableModel, GroupStatus, CLASSIFIER, CONV_LAYERS};
use crate::layers::Layer;
use crate::{Error, RandomStream, Result, Tensor};

/// Initialisation of the filters added by [`ExpandableModel::expand`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandInit {
    /// Incoming filters and fan-out both zero.
    Zero,
    /// Incoming filters He-normal scaled by 0.1, fan-out zero.
    SmallRandom,
}

/// Scale applied to the He-normal standard deviation for new filters.
pub const SMALL_RANDOM_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditKind {
    Append { count: usize },
    Remove { range: Range<usize> },
}

/// A structural change to one parameter tensor, replayed on any state that
/// mirrors the parameter shapes (optimizer moments).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEdit {
    pub param: usize,
    pub axis: usize,
    pub kind: EditKind,
}

impl ParamEdit {
    /// Apply to a tensor, zero-filling appended slices.
    pub fn apply_zeros(&self, t: &mut Tensor) -> Result<()> {
        match &self.kind {
            EditKind::Append { count } => t.append_along(self.axis, *count, || 0.0),
            EditKind::Remove { range } => t.remove_along(self.axis, range.clone()),
        }
    }
}

/// Parameter index of each expandable convolution's weight.
const CONV_WEIGHT_PARAM: [usize; 3] = [0, 4, 8];
/// Parameter index of the weight consuming each convolution's output.
const FANOUT_PARAM: [usize; 3] = [4, 8, 14];

/// Where a filter group's weights live: `(param, axis, range)` for the
/// incoming filters and for the fan-out slice of the next layer.
pub type GroupSlices = [(usize, usize, Range<usize>); 2];

impl ExpandableModel {
    pub(crate) fn group_slices(&self, layer: usize, channels: &Range<usize>) -> GroupSlices {
        let per_channel = if layer == 2 {
            self.spec.linear_width
        } else {
            1
        };
        [
            (CONV_WEIGHT_PARAM[layer], 0, channels.clone()),
            (
                FANOUT_PARAM[layer],
                1,
                channels.start * per_channel..channels.end * per_channel,
            ),
        ]
    }

    /// Slices of every live added group, as `(group_id, slices)`.
    pub fn added_group_slices(&self) -> Vec<(u32, GroupSlices)> {
        self.ledger
            .live_added()
            .map(|(l, g)| (g.group_id, self.group_slices(l, &g.channels)))
            .collect()
    }

    /// Euclidean norm of a group's incoming filters concatenated with its
    /// fan-out slice.
    pub fn group_norm(&self, group_id: u32) -> Result<f64> {
        let (layer, rec) = self
            .ledger
            .find(group_id)
            .ok_or_else(|| Error::Lookup(format!("no filter group {group_id}")))?;
        if rec.status == GroupStatus::Pruned {
            return Err(Error::Lookup(format!("filter group {group_id} is pruned")));
        }
        Ok(self.slices_norm(&self.group_slices(layer, &rec.channels)))
    }

    pub(crate) fn slices_norm(&self, slices: &GroupSlices) -> f64 {
        let params = self.params();
        slices
            .iter()
            .map(|(p, axis, r)| {
                params[*p]
                    .gather_along(*axis, r.clone())
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Append `o` output channels to convolution `layer_index` (1-based) and
    /// the matching input slices to the layer after it. Existing weights are
    /// untouched; the fan-out slices are zero, so the network function is
    /// preserved. Returns the edits for mirroring onto optimizer state.
    pub fn expand(
        &mut self,
        layer_index: usize,
        o: usize,
        init: ExpandInit,
        rng: &mut RandomStream,
    ) -> Result<Vec<ParamEdit>> {
        if !(1..=3).contains(&layer_index) {
            return Err(Error::Expansion(format!(
                "layer index {layer_index} is not one of the expandable convolutions 1..=3"
            )));
        }
        if o == 0 {
            return Ok(Vec::new());
        }
        let l = layer_index - 1;
        let width = self.spec.conv_widths[l];
        let new_width = width
            .checked_add(o)
            .ok_or_else(|| Error::Expansion(format!("width {width} + {o} overflows")))?;
        if new_width > self.spec.max_width {
            return Err(Error::Expansion(format!(
                "widening layer {layer_index} to {new_width} exceeds max width {}",
                self.spec.max_width
            )));
        }
        let lw = self.spec.linear_width;
        let fanout_count = if l == 2 {
            o.checked_mul(lw)
                .filter(|n| n.checked_add(width * lw).is_some())
                .ok_or_else(|| Error::Expansion("classifier width overflows".into()))?
        } else {
            o
        };

        let conv_idx = CONV_LAYERS[l];
        if let Layer::Conv2d { weight, bias } = &mut self.layers[conv_idx] {
            let s = weight.shape();
            let std = SMALL_RANDOM_GAIN * (2.0 / (s[1] * s[2] * s[3]) as f64).sqrt();
            match init {
                ExpandInit::Zero => weight.append_along(0, o, || 0.0)?,
                ExpandInit::SmallRandom => {
                    weight.append_along(0, o, || ((std * rng.normal()) as f32) as f64)?
                }
            }
            bias.append_along(0, o, || 0.0)?;
        }
        let bn = self.batchnorm_mut(l);
        bn.gamma.append_along(0, o, || 1.0)?;
        bn.beta.append_along(0, o, || 0.0)?;
        if let Some(r) = &mut bn.running {
            r.mean.extend(std::iter::repeat_n(0.0, o));
            r.var.extend(std::iter::repeat_n(1.0, o));
        }
        let next = if l == 2 {
            CLASSIFIER
        } else {
            CONV_LAYERS[l + 1]
        };
        if let Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } = &mut self.layers[next]
        {
            weight.append_along(1, fanout_count, || 0.0)?;
        }

        self.spec.conv_widths[l] = new_width;
        self.ledger.push_added(l, width..new_width);

        let base = CONV_WEIGHT_PARAM[l];
        let mut edits: Vec<ParamEdit> = (0..4)
            .map(|k| ParamEdit {
                param: base + k,
                axis: 0,
                kind: EditKind::Append { count: o },
            })
            .collect();
        edits.push(ParamEdit {
            param: FANOUT_PARAM[l],
            axis: 1,
            kind: EditKind::Append {
                count: fanout_count,
            },
        });
        Ok(edits)
    }

    /// Remove every added group whose norm is strictly below `epsilon`,
    /// together with its fan-out slices and batch-norm entries. Returns the
    /// pruned group ids and the edits applied.
    pub fn prune_groups(&mut self, epsilon: f64) -> Result<(Vec<u32>, Vec<ParamEdit>)> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(Error::Input(format!("prune epsilon {epsilon} must be ≥ 0")));
        }
        let mut doomed: Vec<(usize, u32, Range<usize>)> = self
            .ledger
            .live_added()
            .filter(|(l, g)| self.slices_norm(&self.group_slices(*l, &g.channels)) < epsilon)
            .map(|(l, g)| (l, g.group_id, g.channels.clone()))
            .collect();
        // highest channels first so earlier ranges stay valid
        doomed.sort_by(|a, b| (a.0, b.2.start).cmp(&(b.0, a.2.start)));

        let mut pruned = Vec::new();
        let mut edits = Vec::new();
        for (l, id, channels) in doomed {
            let slices = self.group_slices(l, &channels);
            let base = CONV_WEIGHT_PARAM[l];
            let mut group_edits: Vec<ParamEdit> = (0..4)
                .map(|k| ParamEdit {
                    param: base + k,
                    axis: 0,
                    kind: EditKind::Remove {
                        range: channels.clone(),
                    },
                })
                .collect();
            group_edits.push(ParamEdit {
                param: slices[1].0,
                axis: 1,
                kind: EditKind::Remove {
                    range: slices[1].2.clone(),
                },
            });
            {
                let mut params = self.params_mut();
                for e in &group_edits {
                    e.apply_zeros(params[e.param])?;
                }
            }
            if let Some(r) = &mut self.batchnorm_mut(l).running {
                r.mean.drain(channels.clone());
                r.var.drain(channels.clone());
            }
            self.spec.conv_widths[l] -= channels.len();
            self.ledger.mark_pruned(id)?;
            pruned.push(id);
            edits.extend(group_edits);
        }
        pruned.sort_unstable();
        Ok((pruned, edits))
    }
}
