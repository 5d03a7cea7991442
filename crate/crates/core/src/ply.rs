//! Minimal binary little-endian PLY reader and writer.
//!
//! Only scalar properties are materialised; list properties (e.g. mesh faces
//! that trail a point cloud) are parsed and skipped so that the vertex
//! element of any well-formed file can be read.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

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
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Column-oriented view of one PLY element; every scalar property is widened to `f64`.
#[derive(Debug, Clone, Default)]
pub struct PlyTable {
    pub count: usize,
    order: Vec<String>,
    columns: HashMap<String, Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(|c| c.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.column(name)
            .ok_or_else(|| Error::Format(format!("missing PLY property '{name}'")))
    }

    pub fn property_names(&self) -> &[String] {
        &self.order
    }
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<Vec<Element>> {
    let mut line = String::new();
    let mut read_line = |line: &mut String| -> Result<()> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::Format(format!("reading PLY header: {e}")))?;
        if n == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(())
    };

    read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Format("missing 'ply' magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        read_line(&mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!(
                        "unsupported PLY format '{fmt}', expected binary_little_endian"
                    )));
                }
                saw_format = true;
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::Format(format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count_ty, item_ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before element".into()))?;
                let count = ScalarType::parse(count_ty)
                    .ok_or_else(|| Error::Format(format!("bad list count type '{count_ty}'")))?;
                let item = ScalarType::parse(item_ty)
                    .ok_or_else(|| Error::Format(format!("bad list item type '{item_ty}'")))?;
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::List { count, item },
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before element".into()))?;
                let ty = ScalarType::parse(ty).ok_or_else(|| Error::Format(format!("bad property type '{ty}'")))?;
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::Scalar(ty),
                });
            }
            other => {
                return Err(Error::Format(format!(
                    "unrecognised PLY header line '{}'",
                    other.join(" ")
                )))
            }
        }
    }
    if !saw_format {
        return Err(Error::Format("missing PLY format line".into()));
    }
    Ok(elements)
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated PLY payload while reading {what}")))
}

/// Reads the element called `element` (usually `"vertex"`) from a PLY stream.
pub fn read_element<R: Read>(reader: R, element: &str) -> Result<PlyTable> {
    let mut reader = BufReader::new(reader);
    let elements = parse_header(&mut reader)?;
    let mut scratch = [0u8; 8];
    for el in &elements {
        let is_target = el.name == element;
        let mut table = PlyTable {
            count: el.count,
            ..Default::default()
        };
        if is_target {
            for p in &el.properties {
                if let PropertyKind::Scalar(_) = p.kind {
                    table.order.push(p.name.clone());
                    table.columns.insert(p.name.clone(), Vec::with_capacity(el.count));
                }
            }
        }
        // Fixed-stride fast path: all scalar properties.
        let all_scalar = el.properties.iter().all(|p| matches!(p.kind, PropertyKind::Scalar(_)));
        if all_scalar {
            let stride: usize = el
                .properties
                .iter()
                .map(|p| match p.kind {
                    PropertyKind::Scalar(t) => t.size(),
                    PropertyKind::List { .. } => unreachable!(),
                })
                .sum();
            let mut row = vec![0u8; stride];
            for _ in 0..el.count {
                read_exact(&mut reader, &mut row, &el.name)?;
                if is_target {
                    let mut off = 0;
                    for p in &el.properties {
                        if let PropertyKind::Scalar(t) = p.kind {
                            let v = t.decode(&row[off..off + t.size()]);
                            table.columns.get_mut(&p.name).unwrap().push(v);
                            off += t.size();
                        }
                    }
                }
            }
        } else {
            for _ in 0..el.count {
                for p in &el.properties {
                    match p.kind {
                        PropertyKind::Scalar(t) => {
                            read_exact(&mut reader, &mut scratch[..t.size()], &el.name)?;
                            if is_target {
                                let v = t.decode(&scratch[..t.size()]);
                                table.columns.get_mut(&p.name).unwrap().push(v);
                            }
                        }
                        PropertyKind::List { count, item } => {
                            read_exact(&mut reader, &mut scratch[..count.size()], &el.name)?;
                            let n = count.decode(&scratch[..count.size()]);
                            if n < 0.0 {
                                return Err(Error::Format("negative PLY list length".into()));
                            }
                            let mut skip = vec![0u8; n as usize * item.size()];
                            read_exact(&mut reader, &mut skip, &el.name)?;
                        }
                    }
                }
            }
        }
        if is_target {
            return Ok(table);
        }
    }
    Err(Error::Format(format!("missing PLY element '{element}'")))
}

pub fn read_element_file(path: &Path, element: &str) -> Result<PlyTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_element(file, element)
}

/// A scalar column to be written by [`write_vertices`].
pub enum Column<'a> {
    F32(&'a str, Vec<f32>),
    I32(&'a str, Vec<i32>),
}

impl Column<'_> {
    fn name(&self) -> &str {
        match self {
            Column::F32(n, _) | Column::I32(n, _) => n,
        }
    }

    fn len(&self) -> usize {
        match self {
            Column::F32(_, v) => v.len(),
            Column::I32(_, v) => v.len(),
        }
    }
}

/// Writes a single `vertex` element with the given columns.
pub fn write_vertices<W: Write>(writer: W, columns: &[Column<'_>]) -> Result<()> {
    let count = columns.first().map(|c| c.len()).unwrap_or(0);
    if columns.iter().any(|c| c.len() != count) {
        return Err(Error::Validation("PLY columns differ in length".into()));
    }
    let mut w = BufWriter::new(writer);
    let io = |e: std::io::Error| Error::Format(format!("writing PLY: {e}"));
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {count}\n"));
    for c in columns {
        let ty = match c {
            Column::F32(..) => "float",
            Column::I32(..) => "int",
        };
        header.push_str(&format!("property {ty} {}\n", c.name()));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    for i in 0..count {
        for c in columns {
            match c {
                Column::F32(_, v) => w.write_all(&v[i].to_le_bytes()).map_err(io)?,
                Column::I32(_, v) => w.write_all(&v[i].to_le_bytes()).map_err(io)?,
            }
        }
    }
    w.flush().map_err(io)
}

pub fn write_vertices_file(path: &Path, columns: &[Column<'_>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_vertices(file, columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_back_written_columns() {
        let mut buf = Vec::new();
        write_vertices(
            &mut buf,
            &[Column::F32("x", vec![1.0, 2.5]), Column::I32("instance", vec![7, -1])],
        )
        .unwrap();
        let t = read_element(buf.as_slice(), "vertex").unwrap();
        assert_eq!(t.count, 2);
        assert_eq!(t.column("x").unwrap(), &[1.0, 2.5]);
        assert_eq!(t.column("instance").unwrap(), &[7.0, -1.0]);
        assert_eq!(t.property_names(), &["x".to_string(), "instance".to_string()]);
    }

    #[test]
    fn skips_trailing_list_elements_and_reads_target_after_them() {
        let mut data = b"ply\nformat binary_little_endian 1.0\nelement face 1\nproperty list uchar int vertex_indices\nelement vertex 1\nproperty double x\nend_header\n".to_vec();
        data.push(3);
        for i in 0..3i32 {
            data.extend_from_slice(&i.to_le_bytes());
        }
        data.extend_from_slice(&4.25f64.to_le_bytes());
        let t = read_element(data.as_slice(), "vertex").unwrap();
        assert_eq!(t.column("x").unwrap(), &[4.25]);
    }

    #[test]
    fn rejects_ascii_and_truncated_files() {
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(read_element(&ascii[..], "vertex"), Err(Error::Format(_))));
        let short = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nend_header\n\0\0\0\0";
        let err = read_element(&short[..], "vertex").unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn missing_property_is_named() {
        let mut buf = Vec::new();
        write_vertices(&mut buf, &[Column::F32("x", vec![0.0])]).unwrap();
        let t = read_element(buf.as_slice(), "vertex").unwrap();
        let err = t.require("opacity").unwrap_err();
        assert!(err.to_string().contains("opacity"));
    }
}
