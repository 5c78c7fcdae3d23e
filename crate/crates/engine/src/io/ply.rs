//! PLY reading and writing: initialization point clouds and model
//! checkpoints in the community per-vertex property layout
//! (x,y,z, nx,ny,nz, f_dc_0..2, f_rest_0..44, opacity, scale_0..2,
//! rot_0..3). Checkpoints are written as ASCII doubles so parameters
//! round-trip bit for bit; the reader also accepts float32 and
//! binary-little-endian files from external tools.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use grendel_core::cloud::{GaussianCloud, InitPoint, SH_PER_GAUSSIAN};
use grendel_core::sh::{basis_len, SH_COEFFS};

use crate::error::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    Float,
    Double,
    Uchar,
    Int,
    Uint,
}

impl PropType {
    fn parse(s: &str) -> Option<PropType> {
        match s {
            "float" | "float32" => Some(PropType::Float),
            "double" | "float64" => Some(PropType::Double),
            "uchar" | "uint8" => Some(PropType::Uchar),
            "int" | "int32" => Some(PropType::Int),
            "uint" | "uint32" => Some(PropType::Uint),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PropType::Uchar => 1,
            PropType::Float | PropType::Int | PropType::Uint => 4,
            PropType::Double => 8,
        }
    }
}

struct PlyHeader {
    format: PlyFormat,
    count: usize,
    props: Vec<(String, PropType)>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<PlyHeader, EngineError> {
    let bad = |msg: String| EngineError::Ply(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    let line_end = |pos: &mut usize| -> Result<String, EngineError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(bad("malformed PLY header".into()));
        }
        let line = String::from_utf8_lossy(&bytes[start..*pos]).trim().to_string();
        *pos += 1;
        Ok(line)
    };
    if line_end(&mut pos)? != "ply" {
        return Err(bad("missing ply magic".into()));
    }
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = line_end(&mut pos)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, _] => {
                return Err(bad(format!("unsupported format {other}")));
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| bad("bad vertex count".into()))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(bad("list properties on vertices are unsupported".into()));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    let ty = PropType::parse(ty)
                        .ok_or_else(|| bad(format!("unsupported property type {ty}")))?;
                    props.push((name.to_string(), ty));
                }
            }
            ["end_header"] => break,
            _ => return Err(bad(format!("unrecognized header line: {line}"))),
        }
    }
    Ok(PlyHeader {
        format: format.ok_or_else(|| bad("missing format line".into()))?,
        count: count.ok_or_else(|| bad("missing vertex element".into()))?,
        props,
        body_offset: pos,
    })
}

/// Per-vertex values as f64, row-major, in header property order.
fn read_body(bytes: &[u8], header: &PlyHeader, path: &Path) -> Result<Vec<f64>, EngineError> {
    let truncated = || EngineError::Ply(format!("{}: unexpected end of PLY body", path.display()));
    let n_props = header.props.len();
    let mut out = Vec::with_capacity(header.count * n_props);
    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(&bytes[header.body_offset..])
                .map_err(|_| EngineError::Ply(format!("{}: non-utf8 ascii body", path.display())))?;
            let mut tokens = text.split_ascii_whitespace();
            for _ in 0..header.count * n_props {
                let token = tokens.next().ok_or_else(truncated)?;
                out.push(token.parse::<f64>().map_err(|_| {
                    EngineError::Ply(format!("{}: bad numeric token {token:?}", path.display()))
                })?);
            }
        }
        PlyFormat::BinaryLe => {
            let row_size: usize = header.props.iter().map(|(_, t)| t.size()).sum();
            let body = &bytes[header.body_offset..];
            if body.len() < row_size * header.count {
                return Err(truncated());
            }
            let mut pos = 0;
            for _ in 0..header.count {
                for (_, ty) in &header.props {
                    let v = match ty {
                        PropType::Uchar => body[pos] as f64,
                        PropType::Float => {
                            f32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as f64
                        }
                        PropType::Double => {
                            f64::from_le_bytes(body[pos..pos + 8].try_into().unwrap())
                        }
                        PropType::Int => {
                            i32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as f64
                        }
                        PropType::Uint => {
                            u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as f64
                        }
                    };
                    out.push(v);
                    pos += ty.size();
                }
            }
        }
    }
    Ok(out)
}

/// Reads an initialization point cloud: x, y, z plus optional red/green/blue.
pub fn read_points(path: &Path) -> Result<Vec<InitPoint>, EngineError> {
    let bytes = fs::read(path).map_err(|e| EngineError::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    let values = read_body(&bytes, &header, path)?;
    let idx = |name: &str| header.props.iter().position(|(n, _)| n == name);
    let (xi, yi, zi) = match (idx("x"), idx("y"), idx("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(EngineError::Ply(format!(
                "{}: missing x/y/z properties",
                path.display()
            )))
        }
    };
    let rgb_idx = match (idx("red"), idx("green"), idx("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    let color_scale = rgb_idx
        .map(|(r, _, _)| {
            if header.props[r].1 == PropType::Uchar {
                255.0
            } else {
                1.0
            }
        })
        .unwrap_or(1.0);
    let n_props = header.props.len();
    let mut points = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let row = &values[i * n_props..(i + 1) * n_props];
        points.push(InitPoint {
            position: [row[xi], row[yi], row[zi]],
            rgb: rgb_idx.map(|(r, g, b)| {
                [
                    row[r] / color_scale,
                    row[g] / color_scale,
                    row[b] / color_scale,
                ]
            }),
        });
    }
    Ok(points)
}

/// Writes a point cloud with 8-bit colors.
pub fn write_points(points: &[InitPoint], path: &Path) -> Result<(), EngineError> {
    let file = fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", points.len()));
    for name in ["x", "y", "z"] {
        out.push_str(&format!("property double {name}\n"));
    }
    for name in ["red", "green", "blue"] {
        out.push_str(&format!("property uchar {name}\n"));
    }
    out.push_str("end_header\n");
    for p in points {
        let rgb = p.rgb.unwrap_or([0.5; 3]);
        out.push_str(&format!(
            "{:?} {:?} {:?} {} {} {}\n",
            p.position[0],
            p.position[1],
            p.position[2],
            (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
            (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
            (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
        ));
    }
    w.write_all(out.as_bytes()).map_err(|e| EngineError::io(path, e))
}

/// Property names of the checkpoint layout at a given SH degree.
fn checkpoint_props(sh_degree: usize) -> Vec<String> {
    let rest = 3 * (basis_len(sh_degree) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for c in 0..3 {
        names.push(format!("f_dc_{c}"));
    }
    for r in 0..rest {
        names.push(format!("f_rest_{r}"));
    }
    names.push("opacity".into());
    for a in 0..3 {
        names.push(format!("scale_{a}"));
    }
    for a in 0..4 {
        names.push(format!("rot_{a}"));
    }
    names
}

/// Writes the model as an ASCII PLY in the community layout. `{:?}` prints
/// the shortest representation that parses back to the identical f64.
pub fn write_checkpoint_cloud(
    cloud: &GaussianCloud,
    sh_degree: usize,
    path: &Path,
) -> Result<(), EngineError> {
    let file = fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let names = checkpoint_props(sh_degree);
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    for n in &names {
        out.push_str(&format!("property double {n}\n"));
    }
    out.push_str("end_header\n");
    let rest_per_channel = basis_len(sh_degree) - 1;
    for i in 0..cloud.len() {
        let mut row: Vec<f64> = Vec::with_capacity(names.len());
        row.extend_from_slice(&cloud.positions[i]);
        row.extend_from_slice(&[0.0, 0.0, 0.0]);
        for c in 0..3 {
            row.push(cloud.sh_coeffs[i][c * SH_COEFFS]);
        }
        for c in 0..3 {
            for k in 1..=rest_per_channel {
                row.push(cloud.sh_coeffs[i][c * SH_COEFFS + k]);
            }
        }
        row.push(cloud.opacity_logits[i]);
        row.extend_from_slice(&cloud.log_scales[i]);
        row.extend_from_slice(&cloud.rotations[i]);
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
        if out.len() > 1 << 20 {
            w.write_all(out.as_bytes()).map_err(|e| EngineError::io(path, e))?;
            out.clear();
        }
    }
    w.write_all(out.as_bytes()).map_err(|e| EngineError::io(path, e))
}

/// Loads a checkpoint cloud, accepting ascii/binary and float/double files.
/// The f_rest property count must match the configured SH degree.
pub fn read_checkpoint_cloud(path: &Path, sh_degree: usize) -> Result<GaussianCloud, EngineError> {
    let bytes = fs::read(path).map_err(|e| EngineError::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    let rest_found = header
        .props
        .iter()
        .filter(|(n, _)| n.starts_with("f_rest_"))
        .count();
    let rest_expected = 3 * (basis_len(sh_degree) - 1);
    if rest_found != rest_expected {
        return Err(EngineError::Ply(format!(
            "{}: {} f_rest properties but SH degree {} needs {}",
            path.display(),
            rest_found,
            sh_degree,
            rest_expected
        )));
    }
    let idx = |name: &str| {
        header
            .props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| {
                EngineError::Ply(format!("{}: missing property {name}", path.display()))
            })
    };
    let values = read_body(&bytes, &header, path)?;
    let n_props = header.props.len();
    let rest_per_channel = rest_expected / 3;

    let pos_i = [idx("x")?, idx("y")?, idx("z")?];
    let dc_i = [idx("f_dc_0")?, idx("f_dc_1")?, idx("f_dc_2")?];
    let mut rest_i = Vec::with_capacity(rest_expected);
    for r in 0..rest_expected {
        rest_i.push(idx(&format!("f_rest_{r}"))?);
    }
    let op_i = idx("opacity")?;
    let scale_i = [idx("scale_0")?, idx("scale_1")?, idx("scale_2")?];
    let rot_i = [idx("rot_0")?, idx("rot_1")?, idx("rot_2")?, idx("rot_3")?];

    let mut cloud = GaussianCloud::default();
    for v in 0..header.count {
        let row = &values[v * n_props..(v + 1) * n_props];
        cloud
            .positions
            .push([row[pos_i[0]], row[pos_i[1]], row[pos_i[2]]]);
        let mut sh = [0.0; SH_PER_GAUSSIAN];
        for c in 0..3 {
            sh[c * SH_COEFFS] = row[dc_i[c]];
            for k in 0..rest_per_channel {
                sh[c * SH_COEFFS + 1 + k] = row[rest_i[c * rest_per_channel + k]];
            }
        }
        cloud.sh_coeffs.push(sh);
        cloud.opacity_logits.push(row[op_i]);
        cloud
            .log_scales
            .push([row[scale_i[0]], row[scale_i[1]], row[scale_i[2]]]);
        cloud.rotations.push([
            row[rot_i[0]],
            row[rot_i[1]],
            row[rot_i[2]],
            row[rot_i[3]],
        ]);
    }
    Ok(cloud)
}
