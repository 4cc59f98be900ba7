//! Minimal PLY support: a single `vertex` element of scalar properties,
//! written as binary little-endian and read from binary little-endian or
//! ASCII files.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v as i8 as u8),
            Self::U8 => out.push(v as u8),
            Self::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Self::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

/// Column-major vertex table. Values are widened to `f64` on read and
/// narrowed to each property's type on write.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VertexTable {
    pub properties: Vec<(String, ScalarType)>,
    pub columns: Vec<Vec<f64>>,
}

impl VertexTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push_column(&mut self, name: impl Into<String>, ty: ScalarType, values: Vec<f64>) {
        self.properties.push((name.into(), ty));
        self.columns.push(values);
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.properties
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// Like [`column`](Self::column) but fails with the missing name.
    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.column(name)
            .ok_or_else(|| Error::format("ply", format!("missing vertex property `{name}`")))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.len();
        if self.columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidInput("PLY columns differ in length".into()));
        }
        let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
        for (name, ty) in &self.properties {
            header.push_str(&format!("property {} {name}\n", ty.name()));
        }
        header.push_str("end_header\n");
        let stride: usize = self.properties.iter().map(|(_, t)| t.size()).sum();
        let mut body = Vec::with_capacity(n * stride);
        for i in 0..n {
            for ((_, ty), col) in self.properties.iter().zip(&self.columns) {
                ty.encode(col[i], &mut body);
            }
        }
        let io = |e| Error::format("ply", format!("write failed: {e}"));
        w.write_all(header.as_bytes()).map_err(io)?;
        w.write_all(&body).map_err(io)?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let next_line = |r: &mut R, line: &mut String| -> Result<()> {
            line.clear();
            let n = r
                .read_line(line)
                .map_err(|e| Error::format("ply header", e.to_string()))?;
            if n == 0 {
                return Err(Error::format("ply header", "unexpected end of file"));
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != "ply" {
            return Err(Error::format("ply header", "missing `ply` magic"));
        }
        let mut ascii = false;
        let mut count = None;
        let mut in_vertex = false;
        let mut properties = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["end_header"] => break,
                ["format", "binary_little_endian", _] => ascii = false,
                ["format", "ascii", _] => ascii = true,
                ["format", other, _] => {
                    return Err(Error::format("ply header", format!("unsupported format `{other}`")))
                }
                ["comment", ..] | ["obj_info", ..] | [] => {}
                ["element", "vertex", n] => {
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|_| Error::format("ply header", format!("bad vertex count `{n}`")))?,
                    );
                    in_vertex = true;
                }
                ["element", name, _] => {
                    if count.is_none() {
                        return Err(Error::format(
                            "ply header",
                            format!("element `{name}` before vertex is not supported"),
                        ));
                    }
                    in_vertex = false;
                }
                ["property", "list", ..] if in_vertex => {
                    return Err(Error::format("ply header", "list properties on vertices are not supported"))
                }
                ["property", ty, name] if in_vertex => {
                    let ty = ScalarType::parse(ty)
                        .ok_or_else(|| Error::format("ply header", format!("unknown property type `{ty}`")))?;
                    properties.push((name.to_string(), ty));
                }
                ["property", ..] => {}
                _ => return Err(Error::format("ply header", format!("unexpected line `{}`", line.trim_end()))),
            }
        }
        let n = count.ok_or_else(|| Error::format("ply header", "no vertex element"))?;
        let mut columns = vec![Vec::with_capacity(n); properties.len()];
        if ascii {
            let mut text = String::new();
            r.read_to_string(&mut text)
                .map_err(|e| Error::format("ply body", e.to_string()))?;
            let mut lines = text.lines();
            for i in 0..n {
                let l = lines
                    .next()
                    .ok_or_else(|| Error::format("ply body", format!("vertex {i}: unexpected end of file")))?;
                let vals: Vec<&str> = l.split_whitespace().collect();
                if vals.len() < properties.len() {
                    return Err(Error::format("ply body", format!("vertex {i}: too few values")));
                }
                for (c, v) in columns.iter_mut().zip(vals) {
                    c.push(
                        v.parse::<f64>()
                            .map_err(|_| Error::format("ply body", format!("vertex {i}: bad value `{v}`")))?,
                    );
                }
            }
        } else {
            let stride: usize = properties.iter().map(|(_, t)| t.size()).sum();
            let mut body = vec![0u8; n * stride];
            r.read_exact(&mut body).map_err(|_| {
                Error::format("ply body", format!("expected {} bytes for {n} vertices", n * stride))
            })?;
            for rec in body.chunks_exact(stride.max(1)).take(n) {
                let mut off = 0;
                for (c, (_, ty)) in columns.iter_mut().zip(&properties) {
                    c.push(ty.decode(&rec[off..]));
                    off += ty.size();
                }
            }
        }
        Ok(Self { properties, columns })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Format { context, message } => Error::Format {
                context: format!("{}: {context}", path.display()),
                message,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let mut t = VertexTable::new();
        t.push_column("x", ScalarType::F32, vec![0.5, -1.25, 3.0]);
        t.push_column("red", ScalarType::U8, vec![0.0, 128.0, 255.0]);
        t.push_column("w", ScalarType::F64, vec![0.1, 0.2, 0.3]);
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        let back = VertexTable::read(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reads_ascii() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty uchar valid\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1.5 1\n-2 0\n";
        let t = VertexTable::read(text.as_bytes()).unwrap();
        assert_eq!(t.column("x").unwrap(), &[1.5, -2.0]);
        assert_eq!(t.column("valid").unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn truncated_body_is_reported() {
        let mut t = VertexTable::new();
        t.push_column("x", ScalarType::F32, vec![1.0; 10]);
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = VertexTable::read(buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("40 bytes"), "{err}");
    }

    #[test]
    fn missing_property_is_named() {
        let t = VertexTable::new();
        assert!(t.require("nx").unwrap_err().to_string().contains("nx"));
    }
}
