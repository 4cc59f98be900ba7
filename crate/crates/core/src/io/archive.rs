//! Binary map archive.
//!
//! Little-endian layout: magic `GMAP`, version byte, `u32` feature dim,
//! `u64` Gaussian count, `f64` voxel size, `f64` covariance floor, then one
//! record per Gaussian of `f64` values: mean (3), covariance upper triangle
//! `xx xy xz yy yz zz` (6), color (3), normal (3), blend state (1), feature
//! (D).

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::ply::{ScalarType, VertexTable};
use crate::error::{Error, Result};
use crate::types::{Gaussian, GaussianMap};

pub const MAGIC: &[u8; 4] = b"GMAP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 8 + 8 + 8;

pub fn record_len(feature_dim: usize) -> usize {
    (16 + feature_dim) * 8
}

pub fn encode_map(map: &GaussianMap) -> Vec<u8> {
    let d = map.feature_dim();
    let mut out = Vec::with_capacity(HEADER_LEN + map.len() * record_len(d));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    out.extend_from_slice(&map.voxel_size().to_le_bytes());
    out.extend_from_slice(&map.covariance_floor().to_le_bytes());
    for g in map.gaussians() {
        let c = &g.covariance;
        let vals = g
            .mean
            .iter()
            .copied()
            .chain([c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]])
            .chain(g.color.iter().copied())
            .chain(g.normal.iter().copied())
            .chain([g.blend_state])
            .chain(g.feature.iter().copied());
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn archive_error(offset: usize, message: impl std::fmt::Display) -> Error {
    Error::Archive(format!("byte {offset}: {message}"))
}

/// Parses an archive and checks every map invariant.
pub fn decode_map(bytes: &[u8]) -> Result<GaussianMap> {
    if bytes.len() < HEADER_LEN {
        return Err(archive_error(
            bytes.len(),
            format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(archive_error(0, "not a map archive (bad magic)"));
    }
    if bytes[4] != VERSION {
        return Err(archive_error(
            4,
            format!("unsupported version {} (expected {VERSION})", bytes[4]),
        ));
    }
    let d = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let voxel_size = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let floor = f64::from_le_bytes(bytes[25..33].try_into().unwrap());
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(archive_error(17, format!("invalid voxel size {voxel_size}")));
    }
    if !(floor >= 0.0 && floor.is_finite()) {
        return Err(archive_error(25, format!("invalid covariance floor {floor}")));
    }
    let rec = record_len(d);
    let body = bytes.len() - HEADER_LEN;
    if body % rec != 0 || body / rec != count {
        let complete = body / rec;
        return Err(archive_error(
            HEADER_LEN + complete * rec,
            format!(
                "header declares {count} records of {rec} bytes but the body holds {body} bytes \
                 (record {complete} is incomplete or extra)"
            ),
        ));
    }
    let mut map = GaussianMap::new(voxel_size, floor, d);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(rec).enumerate() {
        let v: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(j) = v.iter().position(|x| !x.is_finite()) {
            return Err(archive_error(
                HEADER_LEN + i * rec + j * 8,
                format!("record {i} holds a non-finite value"),
            ));
        }
        let covariance = Matrix3::new(v[3], v[4], v[5], v[4], v[6], v[7], v[5], v[7], v[8]);
        map.push(Gaussian {
            mean: Vector3::new(v[0], v[1], v[2]),
            covariance,
            color: Vector3::new(v[9], v[10], v[11]),
            normal: Vector3::new(v[12], v[13], v[14]),
            blend_state: v[15],
            feature: v[16..].to_vec(),
        });
    }
    if let Some(bad) = map.validate().into_iter().next() {
        let offset = bad.gaussian.map_or(HEADER_LEN, |i| HEADER_LEN + i * rec);
        let who = bad
            .gaussian
            .map_or_else(|| "index".to_string(), |i| format!("record {i}"));
        return Err(archive_error(offset, format!("{who}: {}", bad.message)));
    }
    Ok(map)
}

pub fn export_map(map: &GaussianMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}

pub fn import_map(path: &Path) -> Result<GaussianMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_map(&bytes).map_err(|e| match e {
        Error::Archive(m) => Error::Archive(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Gaussian means as oriented colored points, for mesh tools.
pub fn map_vertex_table(map: &GaussianMap, labels: Option<&[usize]>) -> VertexTable {
    let gs = map.gaussians();
    let col = |f: &dyn Fn(&Gaussian) -> f64| gs.iter().map(f).collect::<Vec<_>>();
    let mut t = VertexTable::new();
    t.push_column("x", ScalarType::F32, col(&|g| g.mean.x));
    t.push_column("y", ScalarType::F32, col(&|g| g.mean.y));
    t.push_column("z", ScalarType::F32, col(&|g| g.mean.z));
    t.push_column("nx", ScalarType::F32, col(&|g| g.normal.x));
    t.push_column("ny", ScalarType::F32, col(&|g| g.normal.y));
    t.push_column("nz", ScalarType::F32, col(&|g| g.normal.z));
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round();
    t.push_column("red", ScalarType::U8, col(&|g| byte(g.color.x)));
    t.push_column("green", ScalarType::U8, col(&|g| byte(g.color.y)));
    t.push_column("blue", ScalarType::U8, col(&|g| byte(g.color.z)));
    if let Some(labels) = labels {
        t.push_column(
            "label",
            ScalarType::I32,
            labels.iter().map(|&l| l as f64).collect(),
        );
    }
    t
}

pub fn export_ply(map: &GaussianMap, path: &Path, labels: Option<&[usize]>) -> Result<()> {
    map_vertex_table(map, labels).save(path)
}
