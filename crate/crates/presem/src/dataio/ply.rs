//! Triangle mesh persistence: binary little-endian PLY writer, and a reader
//! that also accepts ASCII PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::mesher::TriangleMesh;

/// Write as binary little-endian PLY with vertex {x,y,z,nx,ny,nz: f32} and
/// face {vertex_indices: list uchar of i32}.
pub fn write_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty float ny\nproperty float nz\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )?;
    for (v, n) in mesh.vertices.iter().zip(mesh.normals.iter()) {
        for val in [v.x, v.y, v.z, n.x, n.y, n.z] {
            w.write_all(&(val as f32).to_le_bytes())?;
        }
    }
    for face in &mesh.faces {
        w.write_all(&[3u8])?;
        for &i in face {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct PropSpec {
    name: String,
    /// Bytes per scalar (binary) — 4 for float/int, 8 for double.
    width: usize,
    is_double: bool,
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let f = File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    // Header is ASCII lines terminated by end_header.
    let mut line = String::new();
    let mut read_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::data("unexpected end of PLY header"));
        }
        Ok(line.trim().to_string())
    };
    let magic = read_line(&mut r)?;
    if magic != "ply" {
        return Err(Error::data("not a PLY file (missing magic)"));
    }
    let mut ascii = false;
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<PropSpec> = Vec::new();
    let mut in_element = String::new();
    let mut face_count_width = 1usize;
    let mut face_index_width = 4usize;
    loop {
        let l = read_line(&mut r)?;
        if l == "end_header" {
            break;
        }
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.first().copied() {
            Some("format") => {
                ascii = match tok.get(1).copied() {
                    Some("ascii") => true,
                    Some("binary_little_endian") => false,
                    other => {
                        return Err(Error::data(format!(
                            "unsupported PLY format: {other:?}"
                        )))
                    }
                };
            }
            Some("comment") => {}
            Some("element") => {
                in_element = tok.get(1).unwrap_or(&"").to_string();
                let count: usize = tok
                    .get(2)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::data(format!("bad element line: {l}")))?;
                match in_element.as_str() {
                    "vertex" => n_vertices = count,
                    "face" => n_faces = count,
                    _ => {}
                }
            }
            Some("property") => {
                if in_element == "vertex" {
                    let ty = tok.get(1).copied().unwrap_or("");
                    let name = tok.get(2).copied().unwrap_or("");
                    let (width, is_double) = match ty {
                        "float" | "float32" | "int" | "int32" | "uint" | "uint32" => (4, false),
                        "double" | "float64" => (8, true),
                        "uchar" | "uint8" | "char" | "int8" => (1, false),
                        "short" | "ushort" | "int16" | "uint16" => (2, false),
                        other => {
                            return Err(Error::data(format!(
                                "unsupported vertex property type {other}"
                            )))
                        }
                    };
                    vertex_props.push(PropSpec {
                        name: name.to_string(),
                        width,
                        is_double,
                    });
                } else if in_element == "face" && tok.get(1).copied() == Some("list") {
                    face_count_width = match tok.get(2).copied() {
                        Some("uchar") | Some("uint8") => 1,
                        Some("int") | Some("uint") | Some("int32") | Some("uint32") => 4,
                        other => {
                            return Err(Error::data(format!("unsupported face count type {other:?}")))
                        }
                    };
                    face_index_width = match tok.get(3).copied() {
                        Some("int") | Some("uint") | Some("int32") | Some("uint32") => 4,
                        other => {
                            return Err(Error::data(format!("unsupported face index type {other:?}")))
                        }
                    };
                }
            }
            _ => {}
        }
    }

    let find = |name: &str| vertex_props.iter().position(|p| p.name == name);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::data("PLY vertex element lacks x/y/z")),
    };
    let normals_present = find("nx").is_some() && find("ny").is_some() && find("nz").is_some();
    let (inx, iny, inz) = (
        find("nx").unwrap_or(0),
        find("ny").unwrap_or(0),
        find("nz").unwrap_or(0),
    );

    let mut vertices = Vec::with_capacity(n_vertices);
    let mut normals = Vec::with_capacity(n_vertices);
    let mut faces = Vec::with_capacity(n_faces);

    if ascii {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        for vi in 0..n_vertices {
            let l = lines
                .next()
                .ok_or_else(|| Error::data(format!("missing vertex line {vi}")))?;
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::data(format!("bad vertex value '{s}' (vertex {vi})")))
                })
                .collect::<Result<_>>()?;
            if vals.len() < vertex_props.len() {
                return Err(Error::data(format!("short vertex line {vi}")));
            }
            vertices.push(Vector3::new(vals[ix], vals[iy], vals[iz]));
            if normals_present {
                normals.push(Vector3::new(vals[inx], vals[iny], vals[inz]));
            }
        }
        for fi in 0..n_faces {
            let l = lines
                .next()
                .ok_or_else(|| Error::data(format!("missing face line {fi}")))?;
            let vals: Vec<i64> = l
                .split_whitespace()
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::data(format!("bad face value '{s}' (face {fi})")))
                })
                .collect::<Result<_>>()?;
            if vals.first().copied() != Some(3) || vals.len() != 4 {
                return Err(Error::data(format!("face {fi} is not a triangle")));
            }
            faces.push([vals[1] as u32, vals[2] as u32, vals[3] as u32]);
        }
    } else {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > buf.len() {
                return Err(Error::data(format!(
                    "PLY payload truncated at byte {at} (wanted {n} more)"
                )));
            }
            let s = &buf[*at..*at + n];
            *at += n;
            Ok(s)
        };
        for _ in 0..n_vertices {
            let mut vals = vec![0.0f64; vertex_props.len()];
            for (pi, p) in vertex_props.iter().enumerate() {
                let s = take(&mut at, p.width)?;
                vals[pi] = if p.is_double {
                    f64::from_le_bytes(s.try_into().unwrap())
                } else if p.width == 4 {
                    f32::from_le_bytes(s.try_into().unwrap()) as f64
                } else if p.width == 2 {
                    u16::from_le_bytes(s.try_into().unwrap()) as f64
                } else {
                    s[0] as f64
                };
            }
            vertices.push(Vector3::new(vals[ix], vals[iy], vals[iz]));
            if normals_present {
                normals.push(Vector3::new(vals[inx], vals[iny], vals[inz]));
            }
        }
        for fi in 0..n_faces {
            let c = take(&mut at, face_count_width)?;
            let count = if face_count_width == 1 {
                c[0] as usize
            } else {
                u32::from_le_bytes(c.try_into().unwrap()) as usize
            };
            if count != 3 {
                return Err(Error::data(format!("face {fi} has {count} vertices")));
            }
            let mut ids = [0u32; 3];
            for slot in ids.iter_mut() {
                let s = take(&mut at, face_index_width)?;
                *slot = i32::from_le_bytes(s.try_into().unwrap()) as u32;
            }
            faces.push(ids);
        }
    }

    if !normals_present {
        normals = vec![Vector3::new(0.0, 0.0, 1.0); vertices.len()];
    }
    Ok(TriangleMesh {
        vertices,
        faces,
        normals,
    })
}
