//! Evaluation inputs on disk: labeled ground-truth clouds and class
//! embedding files.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::ply::{ScalarType, VertexTable};
use crate::error::{Error, Result};
use crate::source::SurfaceSamples;

/// Named class embeddings, as used for open-set segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEmbeddings {
    pub classes: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ClassEmbeddings {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.embeddings.len() {
            return Err(Error::InvalidInput(format!(
                "{} class names but {} embeddings",
                self.classes.len(),
                self.embeddings.len()
            )));
        }
        let Some(dim) = self.embeddings.first().map(Vec::len) else {
            return Err(Error::InvalidInput("no class embeddings".into()));
        };
        for (name, e) in self.classes.iter().zip(&self.embeddings) {
            if e.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "embedding of `{name}` has {} entries, expected {dim}",
                    e.len()
                )));
            }
            if !e.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("embedding of `{name}` is not finite")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let out: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes oriented labeled points as PLY (`x y z nx ny nz label`).
pub fn save_surface(samples: &SurfaceSamples, path: &Path) -> Result<()> {
    let mut t = VertexTable::new();
    let comp = |f: &dyn Fn(usize) -> f64| (0..samples.len()).map(f).collect::<Vec<f64>>();
    t.push_column("x", ScalarType::F64, comp(&|i| samples.points[i].x));
    t.push_column("y", ScalarType::F64, comp(&|i| samples.points[i].y));
    t.push_column("z", ScalarType::F64, comp(&|i| samples.points[i].z));
    t.push_column("nx", ScalarType::F64, comp(&|i| samples.normals[i].x));
    t.push_column("ny", ScalarType::F64, comp(&|i| samples.normals[i].y));
    t.push_column("nz", ScalarType::F64, comp(&|i| samples.normals[i].z));
    t.push_column("label", ScalarType::I32, comp(&|i| samples.labels[i] as f64));
    t.save(path)
}

/// Reads a cloud written by [`save_surface`]. A missing `label` property
/// reads as class 0.
pub fn load_surface(path: &Path) -> Result<SurfaceSamples> {
    let t = VertexTable::load(path)?;
    let named = |e: Error| match e {
        Error::Format { context, message } => Error::format(format!("{}: {context}", path.display()), message),
        other => other,
    };
    let col = |name: &str| t.require(name).map_err(named);
    let v3 = |a: &[f64], b: &[f64], c: &[f64]| -> Vec<Vector3<f64>> {
        (0..t.len()).map(|i| Vector3::new(a[i], b[i], c[i])).collect()
    };
    let points = v3(col("x")?, col("y")?, col("z")?);
    let normals = v3(col("nx")?, col("ny")?, col("nz")?);
    let labels = match t.column("label") {
        Some(l) => l
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::format(path.display().to_string(), format!("negative label {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![0; t.len()],
    };
    Ok(SurfaceSamples { points, normals, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surface_round_trip_is_exact() {
        let samples = SurfaceSamples {
            points: vec![Vector3::new(0.1, -2.5, 1.0 / 3.0), Vector3::new(4.0, 5.0, 6.0)],
            normals: vec![Vector3::z(), Vector3::new(0.6, 0.8, 0.0)],
            labels: vec![3, 0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.ply");
        save_surface(&samples, &path).unwrap();
        assert_eq!(load_surface(&path).unwrap(), samples);
    }

    #[test]
    fn embeddings_need_one_name_each() {
        let e = ClassEmbeddings {
            classes: vec!["wall".into()],
            embeddings: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        assert!(e.validate().is_err());
        let ragged = ClassEmbeddings {
            classes: vec!["wall".into(), "floor".into()],
            embeddings: vec![vec![1.0, 0.0], vec![0.0]],
        };
        assert!(ragged.validate().unwrap_err().to_string().contains("floor"));
    }
}
