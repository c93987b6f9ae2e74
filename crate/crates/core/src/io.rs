//! Cloud and transform file formats: ASCII PLY, plain XYZ and the JSON
//! ground-truth record.

use std::fs;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Formats a value with 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // Rounding may have carried into a new leading digit; that only
        // adds a digit after the point, which is trimmed below.
        if s.contains('.') {
            let s = s.trim_end_matches('0').trim_end_matches('.');
            if s == "-0" { "0".to_string() } else { s.to_string() }
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

pub fn parse_xyz<T: Real>(id: &str, text: &str) -> Result<PointCloud<T>> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        };
        let mut fields = line.split_whitespace();
        let Some(first) = fields.next() else { continue };
        let mut coords = [0.0f64; 3];
        coords[0] = parse_f64(first, lineno)?;
        for c in coords.iter_mut().skip(1) {
            let tok = fields
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: expected 3 coordinates", lineno + 1)))?;
            *c = parse_f64(tok, lineno)?;
        }
        points.push(Point3::new(T::of(coords[0]), T::of(coords[1]), T::of(coords[2])));
    }
    PointCloud::new(id, points)
}

pub fn write_xyz<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        out.push_str(&format!(
            "{} {} {}\n",
            format_sig9(p.x.as_f64()),
            format_sig9(p.y.as_f64()),
            format_sig9(p.z.as_f64())
        ));
    }
    out
}

pub fn parse_ply<T: Real>(id: &str, text: &str) -> Result<PointCloud<T>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::Parse("missing 'ply' magic line".into())),
    }

    // Elements in header order: (name, count, property names).
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut ascii = false;
    loop {
        let Some((lineno, line)) = lines.next() else {
            return Err(Error::Parse("header has no end_header".into()));
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "ascii" {
                    return Err(Error::Parse(format!("unsupported PLY format '{fmt}'")));
                }
                ascii = true;
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad element count", lineno + 1)))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Parse("property before element".into()))?;
                el.2.push(String::from("<list>"));
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Parse("property before element".into()))?;
                el.2.push(name.to_string());
            }
            _ => return Err(Error::Parse(format!("line {}: unrecognised header line", lineno + 1))),
        }
    }
    if !ascii {
        return Err(Error::Parse("PLY format line missing".into()));
    }

    let mut points = Vec::new();
    for (name, count, props) in &elements {
        if name != "vertex" {
            // Skip rows of elements we do not read.
            for _ in 0..*count {
                lines.next();
            }
            continue;
        }
        let col = |axis: &str| {
            props
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| Error::Parse(format!("vertex element lacks property '{axis}'")))
        };
        let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
        if props.iter().any(|p| p == "<list>") {
            return Err(Error::Parse("list properties on vertex are unsupported".into()));
        }
        points.reserve(*count);
        for _ in 0..*count {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| Error::Parse("fewer vertex rows than declared".into()))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < props.len() {
                return Err(Error::Parse(format!("line {}: short vertex row", lineno + 1)));
            }
            let x = parse_f64(toks[cx], lineno)?;
            let y = parse_f64(toks[cy], lineno)?;
            let z = parse_f64(toks[cz], lineno)?;
            points.push(Point3::new(T::of(x), T::of(y), T::of(z)));
        }
    }
    PointCloud::new(id, points)
}

pub fn write_ply<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\ncomment {}\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        if cloud.id().is_empty() { "hireg" } else { cloud.id() },
        cloud.len()
    );
    out.push_str(&write_xyz(cloud));
    out
}

/// Reads a cloud, choosing the format from the file extension (`.ply`,
/// anything else is treated as XYZ).
pub fn read_cloud<T: Real>(path: &Path) -> Result<PointCloud<T>> {
    let text = fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if is_ply(path) {
        parse_ply(&id, &text)
    } else {
        parse_xyz(&id, &text)
    }
}

pub fn write_cloud<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    let text = if is_ply(path) {
        write_ply(cloud)
    } else {
        write_xyz(cloud)
    };
    fs::write(path, text)?;
    Ok(())
}

fn is_ply(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

fn parse_f64(tok: &str, lineno: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::Parse(format!("line {}: '{tok}' is not a number", lineno + 1)))
}

/// Ground-truth / estimated pose as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl TransformRecord {
    pub fn to_transform<T: Real>(&self) -> Result<RigidTransform<T>> {
        RigidTransform::from_row_major(&self.rotation, &self.translation)
    }
}

impl<T: Real> From<&RigidTransform<T>> for TransformRecord {
    fn from(t: &RigidTransform<T>) -> Self {
        Self {
            rotation: t.rotation_row_major(),
            translation: t.translation_array(),
        }
    }
}

pub fn read_transform<T: Real>(path: &Path) -> Result<RigidTransform<T>> {
    let text = fs::read_to_string(path)?;
    let rec: TransformRecord =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    rec.to_transform()
}

pub fn write_transform<T: Real>(path: &Path, t: &RigidTransform<T>) -> Result<()> {
    let text = serde_json::to_string_pretty(&TransformRecord::from(t))
        .map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}
