//! Network snapshot JSON: branches, connections, alpha values, and
//! parameter blobs as base64 of little-endian 64-bit reals. The format is
//! documented in the repository README.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::BnState;
use crate::tensor::Tensor;

use super::{
    ActivKind, ArchWeight, AuxNetwork, BranchParams, BranchSpec, Connection, Direction, FusionLayer,
    FusionOps, Granularity, NetMode,
};

pub const FORMAT_TAG: &str = "auxnas-net-v1";

pub fn encode_f64s(vals: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Parse(format!("bad base64 blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse("blob length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct ConnFile {
    direction: Direction,
    aux_task: usize,
    src_layer: usize,
    dst_layer: usize,
    /// Current alpha value (1.0 for fixed indicators).
    alpha: f64,
    alpha_param: Option<String>,
    adapter: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct FusionFile {
    branch: usize,
    layer: usize,
    projection: Option<String>,
    gamma: String,
    beta: String,
    running_mean_b64: String,
    running_var_b64: String,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format: String,
    mode: NetMode,
    input_dim: usize,
    window: usize,
    granularity: Granularity,
    fusion_ops: FusionOps,
    block_activ: ActivKind,
    primary: BranchSpec,
    auxiliaries: Vec<BranchSpec>,
    connections: Vec<ConnFile>,
    fusion: Vec<FusionFile>,
    params: Vec<ParamFile>,
}

pub fn to_json(net: &AuxNetwork) -> Result<String> {
    let name_of = |id: ParamId| net.params.get(id).name.clone();
    let file = NetworkFile {
        format: FORMAT_TAG.to_string(),
        mode: net.mode,
        input_dim: net.input_dim,
        window: net.window,
        granularity: net.granularity,
        fusion_ops: net.fusion_ops,
        block_activ: net.block_activ,
        primary: net.primary.clone(),
        auxiliaries: net.auxiliaries.clone(),
        connections: net
            .connections
            .iter()
            .map(|c| ConnFile {
                direction: c.direction,
                aux_task: c.aux_task,
                src_layer: c.src_layer,
                dst_layer: c.dst_layer,
                alpha: match c.weight {
                    ArchWeight::Fixed => 1.0,
                    ArchWeight::Learned(id) => net.params.value(ParamId(id)).item(),
                },
                alpha_param: match c.weight {
                    ArchWeight::Fixed => None,
                    ArchWeight::Learned(id) => Some(name_of(ParamId(id))),
                },
                adapter: c.adapter.map(|id| name_of(ParamId(id))),
            })
            .collect(),
        fusion: net
            .fusion
            .iter()
            .map(|((b, i), fl)| FusionFile {
                branch: *b,
                layer: *i,
                projection: fl.projection.map(name_of),
                gamma: name_of(fl.gamma),
                beta: name_of(fl.beta),
                running_mean_b64: encode_f64s(&fl.bn.running_mean),
                running_var_b64: encode_f64s(&fl.bn.running_var),
            })
            .collect(),
        params: net
            .params
            .iter()
            .map(|(_, p)| ParamFile {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                data_b64: encode_f64s(p.value.data()),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn from_json(json: &str) -> Result<AuxNetwork> {
    let file: NetworkFile = serde_json::from_str(json)?;
    if file.format != FORMAT_TAG {
        return Err(Error::Parse(format!(
            "unsupported model format {:?}, expected {FORMAT_TAG:?}",
            file.format
        )));
    }
    let mut store = ParamStore::new();
    let mut by_name: BTreeMap<String, ParamId> = BTreeMap::new();
    for p in &file.params {
        let data = decode_f64s(&p.data_b64)?;
        let id = store.insert(p.name.clone(), p.group, Tensor::new(p.shape.clone(), data)?)?;
        by_name.insert(p.name.clone(), id);
    }
    let lookup = |name: &str| -> Result<ParamId> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parse(format!("model references unknown parameter {name:?}")))
    };

    let branch_params = {
        let mut out = Vec::new();
        let n_branches = 1 + file.auxiliaries.len();
        for b in 0..n_branches {
            let pre = super::branch_prefix(b);
            let spec = if b == 0 { &file.primary } else { &file.auxiliaries[b - 1] };
            out.push(BranchParams {
                stem_w: lookup(&format!("{pre}/stem/w"))?,
                stem_b: lookup(&format!("{pre}/stem/b"))?,
                layer_w: (1..=spec.n_layers)
                    .map(|i| lookup(&format!("{pre}/layer{i}/w")))
                    .collect::<Result<_>>()?,
                layer_b: (1..=spec.n_layers)
                    .map(|i| lookup(&format!("{pre}/layer{i}/b")))
                    .collect::<Result<_>>()?,
                head_w: lookup(&format!("{pre}/head/w"))?,
                head_b: lookup(&format!("{pre}/head/b"))?,
            });
        }
        out
    };

    let connections = file
        .connections
        .iter()
        .map(|c| {
            Ok(Connection {
                direction: c.direction,
                aux_task: c.aux_task,
                src_layer: c.src_layer,
                dst_layer: c.dst_layer,
                weight: match &c.alpha_param {
                    None => ArchWeight::Fixed,
                    Some(name) => ArchWeight::Learned(lookup(name)?.0),
                },
                adapter: match &c.adapter {
                    None => None,
                    Some(name) => Some(lookup(name)?.0),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut fusion = BTreeMap::new();
    for f in &file.fusion {
        fusion.insert(
            (f.branch, f.layer),
            FusionLayer {
                projection: f.projection.as_deref().map(lookup).transpose()?,
                gamma: lookup(&f.gamma)?,
                beta: lookup(&f.beta)?,
                bn: BnState {
                    running_mean: decode_f64s(&f.running_mean_b64)?,
                    running_var: decode_f64s(&f.running_var_b64)?,
                },
            },
        );
    }

    let net = AuxNetwork {
        mode: file.mode,
        input_dim: file.input_dim,
        primary: file.primary,
        auxiliaries: file.auxiliaries,
        window: file.window,
        granularity: file.granularity,
        fusion_ops: file.fusion_ops,
        block_activ: file.block_activ,
        connections,
        fusion,
        branch_params,
        params: store,
    };
    net.check_acyclic()?;
    Ok(net)
}
