//! Bookkeeping of filter groups per expandable layer.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupStatus {
    Initial,
    Added,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: u32,
    /// Live channel range; empty once pruned.
    pub channels: Range<usize>,
    /// Number of channels the group was created with.
    pub size: usize,
    pub session_added: u32,
    pub status: GroupStatus,
}

impl GroupRecord {
    pub fn is_live(&self) -> bool {
        self.status != GroupStatus::Pruned
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionLedger {
    pub layers: [Vec<GroupRecord>; 3],
    pub session: u32,
    pub next_group_id: u32,
}

impl ExpansionLedger {
    pub fn new(widths: [usize; 3], session: u32) -> Self {
        let layers = [0, 1, 2].map(|l| {
            vec![GroupRecord {
                group_id: l as u32,
                channels: 0..widths[l],
                size: widths[l],
                session_added: session,
                status: GroupStatus::Initial,
            }]
        });
        ExpansionLedger {
            layers,
            session,
            next_group_id: 3,
        }
    }

    pub fn begin_session(&mut self, session: u32) {
        self.session = session;
    }

    pub fn push_added(&mut self, layer: usize, channels: Range<usize>) -> u32 {
        let id = self.next_group_id;
        self.next_group_id += 1;
        self.layers[layer].push(GroupRecord {
            group_id: id,
            size: channels.len(),
            channels,
            session_added: self.session,
            status: GroupStatus::Added,
        });
        id
    }

    /// `(layer, record)` for a group id.
    pub fn find(&self, group_id: u32) -> Option<(usize, &GroupRecord)> {
        self.layers.iter().enumerate().find_map(|(l, groups)| {
            groups
                .iter()
                .find(|g| g.group_id == group_id)
                .map(|g| (l, g))
        })
    }

    pub fn live_added(&self) -> impl Iterator<Item = (usize, &GroupRecord)> {
        self.layers.iter().enumerate().flat_map(|(l, groups)| {
            groups
                .iter()
                .filter(|g| g.status == GroupStatus::Added)
                .map(move |g| (l, g))
        })
    }

    /// Mark a group pruned and close the gap it leaves.
    pub fn mark_pruned(&mut self, group_id: u32) -> Result<()> {
        let (layer, _) = self
            .find(group_id)
            .ok_or_else(|| Error::Lookup(format!("no filter group {group_id}")))?;
        let groups = &mut self.layers[layer];
        let idx = groups.iter().position(|g| g.group_id == group_id).unwrap();
        let removed = groups[idx].channels.clone();
        groups[idx].status = GroupStatus::Pruned;
        groups[idx].channels = removed.start..removed.start;
        for g in groups.iter_mut() {
            if g.channels.start >= removed.end && g.group_id != group_id {
                g.channels = g.channels.start - removed.len()..g.channels.end - removed.len();
            }
        }
        Ok(())
    }

    /// Checks that live ranges tile `[0, width)` for each layer.
    pub fn check_partition(&self, widths: [usize; 3]) -> Result<()> {
        for (l, groups) in self.layers.iter().enumerate() {
            let mut live: Vec<&GroupRecord> = groups.iter().filter(|g| g.is_live()).collect();
            live.sort_by_key(|g| g.channels.start);
            let mut next = 0;
            for g in live {
                if g.channels.start != next || g.channels.is_empty() {
                    return Err(Error::Spec(format!(
                        "layer {} group {} covers {:?}, expected to start at {next}",
                        l + 1,
                        g.group_id,
                        g.channels
                    )));
                }
                next = g.channels.end;
            }
            if next != widths[l] {
                return Err(Error::Spec(format!(
                    "layer {} groups cover {next} channels but width is {}",
                    l + 1,
                    widths[l]
                )));
            }
            if groups
                .iter()
                .any(|g| !g.is_live() && !g.channels.is_empty())
            {
                return Err(Error::Spec(format!(
                    "layer {} has a pruned group with channels",
                    l + 1
                )));
            }
        }
        Ok(())
    }
}
