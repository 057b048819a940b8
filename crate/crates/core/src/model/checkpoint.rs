//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! "EXPN"  version
//! spec:    C T K w1 w2 w3 kernel_time linear_width dropout_p:f64 max_width
//! ledger:  session next_group_id
//!          3 × { n_groups, n_groups × { group_id start end size session_added status:u8 } }
//!          status: 0 initial, 1 added, 2 pruned
//! params:  n_tensors, n_tensors × { ndim, ndim × dim, len × f32 }
//! bn:      3 × { present:u8, [width × f64 running mean, width × f64 running var] }
//! optim:   present:u8, [step:u64 lr:f64 beta1:f64 beta2:f64 eps:f64,
//!          per param: len × f64 first moment, len × f64 second moment]
//! ```
//!
//! Parameters are stored as `f32`; training keeps them `f32`-representable
//! so a save/load round trip is exact. Running statistics and optimizer
//! moments are stored as `f64`.

use std::path::Path;

use super::{ExpandableModel, ExpansionLedger, GroupRecord, GroupStatus, NetSpec};
use crate::bytes::{ByteReader, ByteWriter};
use crate::layers::RunningStats;
use crate::train::OptimState;
use crate::{Error, RandomStream, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EXPN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ExpandableModel,
    pub optim: Option<OptimState>,
}

fn status_code(s: GroupStatus) -> u8 {
    match s {
        GroupStatus::Initial => 0,
        GroupStatus::Added => 1,
        GroupStatus::Pruned => 2,
    }
}

impl Checkpoint {
    pub fn new(model: ExpandableModel, optim: Option<OptimState>) -> Self {
        Checkpoint { model, optim }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let s = &self.model.spec;
        w.len32(s.n_eeg_channels);
        w.len32(s.n_timepoints);
        w.len32(s.n_classes);
        for &cw in &s.conv_widths {
            w.len32(cw);
        }
        w.len32(s.kernel_time);
        w.len32(s.linear_width);
        w.f64(s.dropout_p);
        w.len32(s.max_width);

        let l = &self.model.ledger;
        w.u32(l.session);
        w.u32(l.next_group_id);
        for groups in &l.layers {
            w.len32(groups.len());
            for g in groups {
                w.u32(g.group_id);
                w.len32(g.channels.start);
                w.len32(g.channels.end);
                w.len32(g.size);
                w.u32(g.session_added);
                w.u8(status_code(g.status));
            }
        }

        let params = self.model.params();
        w.len32(params.len());
        for p in &params {
            w.len32(p.ndim());
            for &d in p.shape() {
                w.len32(d);
            }
            for &v in p.data() {
                w.f32(v as f32);
            }
        }
        for bn in self.model.batchnorms() {
            match &bn.running {
                None => w.u8(0),
                Some(r) => {
                    w.u8(1);
                    r.mean.iter().for_each(|&v| w.f64(v));
                    r.var.iter().for_each(|&v| w.f64(v));
                }
            }
        }
        match &self.optim {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.step);
                w.f64(o.lr);
                w.f64(o.beta1);
                w.f64(o.beta2);
                w.f64(o.eps);
                for (m, v) in o.m.iter().zip(&o.v) {
                    m.data().iter().for_each(|&x| w.f64(x));
                    v.data().iter().for_each(|&x| w.f64(x));
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, not an EXPN checkpoint".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let spec_at = r.offset();
        let spec = NetSpec {
            n_eeg_channels: r.usize("C")?,
            n_timepoints: r.usize("T")?,
            n_classes: r.usize("K")?,
            conv_widths: [r.usize("w1")?, r.usize("w2")?, r.usize("w3")?],
            kernel_time: r.usize("kernel_time")?,
            linear_width: r.usize("linear_width")?,
            dropout_p: r.f64("dropout_p")?,
            max_width: r.usize("max_width")?,
        };
        spec.validate().map_err(|e| Error::Format {
            offset: spec_at,
            msg: format!("invalid spec: {e}"),
        })?;
        // refuse to allocate for a spec the remaining bytes cannot hold
        let need = spec.param_count().and_then(|n| n.checked_mul(4));
        if need.is_none_or(|n| n > r.remaining()) {
            return Err(Error::Format {
                offset: spec_at,
                msg: format!(
                    "spec implies more parameters than the {} remaining bytes",
                    r.remaining()
                ),
            });
        }

        let session = r.u32("session")?;
        let next_group_id = r.u32("next_group_id")?;
        let mut layers: [Vec<GroupRecord>; 3] = Default::default();
        for groups in &mut layers {
            let n = r.usize("group count")?;
            for _ in 0..n {
                let group_id = r.u32("group id")?;
                let start = r.usize("group start")?;
                let end = r.usize("group end")?;
                let size = r.usize("group size")?;
                let session_added = r.u32("group session")?;
                let status = match r.u8("group status")? {
                    0 => GroupStatus::Initial,
                    1 => GroupStatus::Added,
                    2 => GroupStatus::Pruned,
                    s => return Err(r.error(format!("unknown group status {s}"))),
                };
                if start > end {
                    return Err(r.error(format!("group range {start}..{end} is reversed")));
                }
                groups.push(GroupRecord {
                    group_id,
                    channels: start..end,
                    size,
                    session_added,
                    status,
                });
            }
        }

        let mut model = ExpandableModel::build(spec, &mut RandomStream::new(0, 0))
            .map_err(|e| r.error(e.to_string()))?;
        model.ledger = ExpansionLedger {
            layers,
            session,
            next_group_id,
        };

        let n = r.usize("tensor count")?;
        if n != model.params().len() {
            return Err(r.error(format!(
                "{n} parameter tensors, spec implies {}",
                model.params().len()
            )));
        }
        for i in 0..n {
            let at = r.offset();
            let ndim = r.usize("ndim")?;
            if ndim > 8 {
                return Err(r.error(format!("tensor {i} has {ndim} axes")));
            }
            let shape = (0..ndim)
                .map(|_| r.usize("dim"))
                .collect::<Result<Vec<_>>>()?;
            let expected = model.params()[i].shape().to_vec();
            if shape != expected {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("tensor {i} has shape {shape:?}, spec implies {expected:?}"),
                });
            }
            let data = r.f32_vec(shape.iter().product(), "tensor data")?;
            *model.params_mut()[i] = Tensor::new(shape, data)?;
        }
        for l in 0..3 {
            let width = model.spec.conv_widths[l];
            let running = match r.u8("running-stats flag")? {
                0 => None,
                1 => Some(RunningStats {
                    mean: r.f64_vec(width, "running mean")?,
                    var: r.f64_vec(width, "running var")?,
                }),
                f => return Err(r.error(format!("bad running-stats flag {f}"))),
            };
            model.batchnorm_mut(l).running = running;
        }
        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("step")?;
                let mut o = OptimState::for_model(&model, r.f64("lr")?);
                o.step = step;
                o.beta1 = r.f64("beta1")?;
                o.beta2 = r.f64("beta2")?;
                o.eps = r.f64("eps")?;
                for i in 0..o.m.len() {
                    let len = o.m[i].len();
                    let m = r.f64_vec(len, "first moment")?;
                    let v = r.f64_vec(len, "second moment")?;
                    o.m[i].data_mut().copy_from_slice(&m);
                    o.v[i].data_mut().copy_from_slice(&v);
                }
                Some(o)
            }
            f => return Err(r.error(format!("bad optimizer flag {f}"))),
        };
        r.expect_end()?;
        model
            .check_consistency()
            .map_err(|e| r.error(e.to_string()))?;
        Ok(Checkpoint { model, optim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
