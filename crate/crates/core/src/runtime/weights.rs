//! `TDNW` weights files: magic `TDNW`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the name, u8 dtype (0 = f32), u8 rank,
//! u32 dims and the little-endian payload.
//!
//! Tensors are named `<node>.weight`, `<node>.bias`, `<node>.bn_scale`,
//! `<node>.bn_shift`, `<node>.bn_mean` and `<node>.bn_var`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::RuntimeError;
use crate::archdsl::ArchGraph;
use crate::train::ModelParams;

pub const MAGIC: &[u8; 4] = b"TDNW";
pub const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> RuntimeError {
    RuntimeError::Weights(msg.into())
}

fn named_tensors<'a>(graph: &'a ArchGraph, params: &'a ModelParams) -> Vec<(String, Vec<usize>, &'a [f32])> {
    let mut out = Vec::new();
    for (node, p) in graph.nodes().iter().zip(&params.nodes) {
        let Some(p) = p else { continue };
        out.push((format!("{}.weight", node.id), p.weight_dims.clone(), p.weight.as_slice()));
        if let Some(b) = &p.bias {
            out.push((format!("{}.bias", node.id), vec![b.len()], b.as_slice()));
        }
        if let Some(bn) = &p.bn {
            for (suffix, v) in [
                ("bn_scale", &bn.scale),
                ("bn_shift", &bn.shift),
                ("bn_mean", &bn.running_mean),
                ("bn_var", &bn.running_var),
            ] {
                out.push((format!("{}.{suffix}", node.id), vec![v.len()], v.as_slice()));
            }
        }
    }
    out
}

pub fn write_weights(mut w: impl Write, graph: &ArchGraph, params: &ModelParams) -> Result<(), RuntimeError> {
    params.validate(graph)?;
    let tensors = named_tensors(graph, params);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, dims, data) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| err(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[0u8, dims.len() as u8])?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], RuntimeError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| err("truncated file"))?;
    Ok(buf)
}

/// Reads every tensor in file order.
pub fn read_tensors(mut r: impl Read) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>, RuntimeError> {
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| err("truncated file"))?;
        let name = String::from_utf8(name).map_err(|_| err("tensor name is not UTF-8"))?;
        let [dtype, rank] = read_array::<2>(&mut r)?;
        if dtype != 0 {
            return Err(err(format!("{name}: unsupported dtype {dtype}")));
        }
        let dims: Vec<usize> =
            (0..rank).map(|_| read_array::<4>(&mut r).map(|b| u32::from_le_bytes(b) as usize)).collect::<Result<_, _>>()?;
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| err(format!("{name}: truncated payload")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, dims, data));
    }
    Ok(out)
}

/// Reads weights for `graph`; every expected tensor must be present with the
/// expected dims, and no others.
pub fn read_weights(r: impl Read, graph: &ArchGraph) -> Result<ModelParams, RuntimeError> {
    let mut found: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for (name, dims, data) in read_tensors(r)? {
        if found.insert(name.clone(), (dims, data)).is_some() {
            return Err(err(format!("duplicate tensor {name}")));
        }
    }
    let mut params = ModelParams::init(graph, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        named_tensors(graph, &params).into_iter().map(|(n, d, _)| (n, d)).collect();
    let mut values = Vec::with_capacity(expected.len());
    for (name, dims) in &expected {
        let (got_dims, data) = found.remove(name).ok_or_else(|| err(format!("missing tensor {name}")))?;
        if &got_dims != dims {
            return Err(err(format!("{name}: dims {got_dims:?}, expected {dims:?}")));
        }
        values.push(data);
    }
    if let Some(extra) = found.keys().next() {
        return Err(err(format!("unexpected tensor {extra}")));
    }
    let mut values = values.into_iter();
    for p in params.nodes.iter_mut().flatten() {
        p.weight = values.next().expect("counted");
        if let Some(b) = p.bias.as_mut() {
            *b = values.next().expect("counted");
        }
        if let Some(bn) = p.bn.as_mut() {
            bn.scale = values.next().expect("counted");
            bn.shift = values.next().expect("counted");
            bn.running_mean = values.next().expect("counted");
            bn.running_var = values.next().expect("counted");
        }
    }
    params.validate(graph)?;
    Ok(params)
}

pub fn save_weights(path: &Path, graph: &ArchGraph, params: &ModelParams) -> Result<(), RuntimeError> {
    write_weights(std::io::BufWriter::new(std::fs::File::create(path)?), graph, params)
}

pub fn load_weights(path: &Path, graph: &ArchGraph) -> Result<ModelParams, RuntimeError> {
    read_weights(std::io::BufReader::new(std::fs::File::open(path)?), graph)
}
