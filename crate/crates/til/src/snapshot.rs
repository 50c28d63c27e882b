//! Binary model snapshots.
//!
//! Little-endian layout: magic `TILM`, format version, strategy tag,
//! presence flags, dimensions, then raw f64 payloads for embeddings,
//! generator blocks, and cluster state. Floats round-trip bit-exactly,
//! so a reloaded model scores identically to the one saved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::backbone::EmbeddingTable;
use crate::clustering::ClusterState;
use crate::error::{Result, TilError};
use crate::trainer::{Strategy, TilModel};
use crate::weightgen::WeightNetParams;

const MAGIC: &[u8; 4] = b"TILM";
const VERSION: u32 = 1;
const FLAG_NET: u8 = 1;
const FLAG_CLUSTER: u8 = 2;

fn strategy_tag(s: Strategy) -> u8 {
    match s {
        Strategy::BaselineBpr => 0,
        Strategy::TilUi => 1,
        Strategy::TilMi => 2,
        Strategy::TilMik => 3,
    }
}

fn strategy_from_tag(tag: u8) -> Result<Strategy> {
    Ok(match tag {
        0 => Strategy::BaselineBpr,
        1 => Strategy::TilUi,
        2 => Strategy::TilMi,
        3 => Strategy::TilMik,
        other => return Err(TilError::Snapshot(format!("unknown strategy tag {other}"))),
    })
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<'a>(w: &mut impl Write, vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r)?);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| TilError::Snapshot(format!("bad matrix shape: {e}")))
}

fn read_vector(r: &mut impl Read, len: usize) -> Result<Array1<f64>> {
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(read_f64(r)?);
    }
    Ok(Array1::from_vec(data))
}

pub fn save_model(path: impl AsRef<Path>, model: &TilModel) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[strategy_tag(model.strategy)])?;
    let mut flags = 0u8;
    if model.weight_net.is_some() {
        flags |= FLAG_NET;
    }
    if model.cluster.is_some() {
        flags |= FLAG_CLUSTER;
    }
    w.write_all(&[flags])?;
    let theta = &model.theta;
    write_u64(&mut w, theta.n_users() as u64)?;
    write_u64(&mut w, theta.n_items() as u64)?;
    write_u64(&mut w, theta.dim() as u64)?;
    w.write_all(&model.alpha_scale.to_le_bytes())?;
    write_f64s(&mut w, theta.p.iter())?;
    write_f64s(&mut w, theta.q.iter())?;
    if let Some(net) = &model.weight_net {
        write_f64s(&mut w, net.w1.iter())?;
        write_f64s(&mut w, net.b1.iter())?;
        write_f64s(&mut w, net.w2.iter())?;
        w.write_all(&net.b2.to_le_bytes())?;
    }
    if let Some(cluster) = &model.cluster {
        write_u64(&mut w, cluster.k() as u64)?;
        w.write_all(&cluster.temperature.to_le_bytes())?;
        write_f64s(&mut w, cluster.centers.iter())?;
        for &m in &cluster.membership {
            write_u64(&mut w, m as u64)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TilModel> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TilError::Snapshot("not a model snapshot (bad magic)".into()));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(TilError::Snapshot(format!(
            "unsupported snapshot version {version} (supported: {VERSION})"
        )));
    }
    let mut tag = [0u8; 2];
    r.read_exact(&mut tag)?;
    let strategy = strategy_from_tag(tag[0])?;
    let flags = tag[1];
    let n_users = read_u64(&mut r)? as usize;
    let n_items = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let alpha_scale = read_f64(&mut r)?;
    let p = read_matrix(&mut r, n_users, dim)?;
    let q = read_matrix(&mut r, n_items, dim)?;
    let theta = EmbeddingTable { p, q };
    let weight_net = if flags & FLAG_NET != 0 {
        let w1 = read_matrix(&mut r, dim, 2 * dim)?;
        let b1 = read_vector(&mut r, dim)?;
        let w2 = read_vector(&mut r, dim)?;
        let b2 = read_f64(&mut r)?;
        Some(WeightNetParams { w1, b1, w2, b2 })
    } else {
        None
    };
    let cluster = if flags & FLAG_CLUSTER != 0 {
        let k = read_u64(&mut r)? as usize;
        let temperature = read_f64(&mut r)?;
        let centers = read_matrix(&mut r, k, dim)?;
        let mut membership = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            membership.push(read_u64(&mut r)? as usize);
        }
        let soft = crate::clustering::soft_assign(&theta.q, &centers, temperature);
        let target = crate::clustering::target(&soft);
        Some(ClusterState { centers, soft, target, membership, temperature })
    } else {
        None
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TilError::Snapshot("trailing bytes after payload".into()));
    }
    Ok(TilModel { theta, weight_net, cluster, strategy, alpha_scale })
}
