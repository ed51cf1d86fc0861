//! Binary checkpoint.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32` feature_dim,
//! hidden_dim, scm_dim, N_O, N_R, `u8` inference branch (0 = CLB, 1 = FLB),
//! `u8` SCM flag, `u32` block count, then per block in ascending name order:
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension and the
//! values as `f64`. Frozen tables are stored as `frozen.*` blocks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::datagen::PriorBias;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::scm::EmbeddingTable;

use super::{Branch, DualBranchModel, ModelDims};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGGHTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const PRIOR_BLOCK: &str = "frozen.prior_bias";
const PRED_EMB_BLOCK: &str = "frozen.predicate_emb";
const OBJ_EMB_BLOCK: &str = "frozen.object_emb";

pub fn encode_checkpoint(model: &DualBranchModel) -> Vec<u8> {
    let mut blocks: BTreeMap<&str, &Tensor> = model
        .params
        .iter()
        .map(|(k, v)| (k.as_str(), v))
        .collect();
    blocks.insert(PRIOR_BLOCK, model.prior.tensor());
    blocks.insert(PRED_EMB_BLOCK, &model.embeddings.predicate_emb);
    blocks.insert(OBJ_EMB_BLOCK, &model.embeddings.object_emb);

    let d = &model.dims;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        d.feature_dim as u32,
        d.hidden_dim as u32,
        d.scm_dim as u32,
        d.num_object_classes as u32,
        d.num_predicates as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(match model.inference_branch {
        Branch::Clb => 0,
        Branch::Flb => 1,
    });
    out.push(model.scm_enabled as u8);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, model: &DualBranchModel) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("checkpoint", "unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<DualBranchModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let dims = ModelDims {
        feature_dim: r.u32()? as usize,
        hidden_dim: r.u32()? as usize,
        scm_dim: r.u32()? as usize,
        num_object_classes: r.u32()? as usize,
        num_predicates: r.u32()? as usize,
    };
    let inference_branch = match r.u8()? {
        0 => Branch::Clb,
        1 => Branch::Flb,
        b => return Err(Error::format("checkpoint", format!("unknown branch tag {b}"))),
    };
    let scm_enabled = r.u8()? != 0;
    let count = r.u32()?;
    let mut blocks = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "block name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > buf.len() / 8 {
            return Err(Error::format("checkpoint", format!("block `{name}` too large")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        blocks.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }

    let mut take_block = |name: &str| {
        blocks
            .remove(name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing block `{name}`")))
    };
    let prior = PriorBias::from_tensor(take_block(PRIOR_BLOCK)?)?;
    let embeddings = EmbeddingTable {
        predicate_emb: take_block(PRED_EMB_BLOCK)?,
        object_emb: take_block(OBJ_EMB_BLOCK)?,
    };

    // Reference layout for shape validation.
    let reference = DualBranchModel::new(dims, PriorBias::zeros(dims.num_object_classes, dims.num_classes()), 0)?;
    if prior.tensor().shape() != reference.prior.tensor().shape()
        || embeddings.predicate_emb.shape() != reference.embeddings.predicate_emb.shape()
        || embeddings.object_emb.shape() != reference.embeddings.object_emb.shape()
    {
        return Err(Error::format("checkpoint", "frozen table shape mismatch"));
    }
    let mut params = ParamStore::new();
    for (name, expected) in reference.params.iter() {
        let t = blocks
            .remove(name.as_str())
            .ok_or_else(|| Error::format("checkpoint", format!("missing block `{name}`")))?;
        if t.shape() != expected.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("block `{name}` has shape {:?}, expected {:?}", t.shape(), expected.shape()),
            ));
        }
        params.insert(name, t)?;
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::format("checkpoint", format!("unexpected block `{extra}`")));
    }
    Ok(DualBranchModel {
        dims,
        params,
        prior,
        embeddings,
        inference_branch,
        scm_enabled,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<DualBranchModel> {
    decode_checkpoint(&fs::read(path)?)
}
