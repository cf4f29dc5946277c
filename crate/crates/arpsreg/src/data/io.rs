//! Point-cloud file formats: ASCII XYZ and binary little-endian PLY with
//! double-precision positions. Both round-trip f64 coordinates losslessly
//! (XYZ via shortest-round-trip decimal printing, PLY bit-for-bit).

use crate::error::{Error, Result};
use crate::pointset::PointSet;
use nalgebra::Vector3;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

pub fn save_xyz(path: &Path, ps: &PointSet) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in ps.iter() {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_xyz(path: &Path) -> Result<PointSet> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut points = Vec::new();
    let display = path.display().to_string();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let mut coord = [0.0f64; 3];
        for c in coord.iter_mut() {
            let token = it.next().ok_or_else(|| Error::Parse {
                path: display.clone(),
                line: idx + 1,
                message: "expected three coordinates".into(),
            })?;
            *c = token.parse().map_err(|e| Error::Parse {
                path: display.clone(),
                line: idx + 1,
                message: format!("bad number '{token}': {e}"),
            })?;
        }
        if it.next().is_some() {
            return Err(Error::Parse {
                path: display,
                line: idx + 1,
                message: "trailing tokens after z coordinate".into(),
            });
        }
        points.push(Vector3::new(coord[0], coord[1], coord[2]));
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: display,
            line: 0,
            message: "file contains no points".into(),
        });
    }
    PointSet::new(points)
}

pub fn save_ply(path: &Path, ps: &PointSet) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        ps.len()
    )?;
    for p in ps.iter() {
        w.write_all(&p.x.to_le_bytes())?;
        w.write_all(&p.y.to_le_bytes())?;
        w.write_all(&p.z.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<PointSet> {
    let display = path.display().to_string();
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    let mut line_no = 0usize;
    let mut vertex_count: Option<usize> = None;
    let expected_props = ["x", "y", "z"];
    let mut props_seen = 0usize;
    loop {
        header.clear();
        let n = reader.read_until(b'\n', &mut header)?;
        if n == 0 {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                message: "unexpected end of header".into(),
            });
        }
        line_no += 1;
        let line = String::from_utf8_lossy(&header);
        let line = line.trim_end();
        let err = |message: String| Error::Parse {
            path: display.clone(),
            line: line_no,
            message,
        };
        match line_no {
            1 => {
                if line != "ply" {
                    return Err(err(format!("expected 'ply', found '{line}'")));
                }
            }
            2 => {
                if line != "format binary_little_endian 1.0" {
                    return Err(err(format!("unsupported format '{line}'")));
                }
            }
            _ => {
                if let Some(rest) = line.strip_prefix("element vertex ") {
                    vertex_count = Some(rest.parse().map_err(|e| {
                        err(format!("bad vertex count '{rest}': {e}"))
                    })?);
                } else if let Some(rest) = line.strip_prefix("property double ") {
                    if props_seen >= 3 || rest != expected_props[props_seen] {
                        return Err(err(format!("unexpected property '{rest}'")));
                    }
                    props_seen += 1;
                } else if line == "end_header" {
                    break;
                } else if line.starts_with("comment") {
                    continue;
                } else {
                    return Err(err(format!("unsupported header line '{line}'")));
                }
            }
        }
    }
    let count = vertex_count.ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: line_no,
        message: "header missing 'element vertex'".into(),
    })?;
    if props_seen != 3 {
        return Err(Error::Parse {
            path: display,
            line: line_no,
            message: "header must declare exactly double x, y, z".into(),
        });
    }
    let mut points = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        let mut coord = [0.0f64; 3];
        for c in coord.iter_mut() {
            reader.read_exact(&mut buf).map_err(|_| Error::Parse {
                path: display.clone(),
                line: line_no,
                message: "payload truncated".into(),
            })?;
            *c = f64::from_le_bytes(buf);
        }
        points.push(Vector3::new(coord[0], coord[1], coord[2]));
    }
    if reader.read(&mut buf)? != 0 {
        return Err(Error::Parse {
            path: display,
            line: line_no,
            message: "trailing bytes after payload".into(),
        });
    }
    PointSet::new(points)
}

/// Dispatch by extension: `.xyz` or `.ply`.
pub fn load_pointset(path: &Path) -> Result<PointSet> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => load_xyz(path),
        Some("ply") => load_ply(path),
        other => Err(Error::Config(format!(
            "unsupported point cloud extension {other:?} for {}",
            path.display()
        ))),
    }
}

pub fn save_pointset(path: &Path, ps: &PointSet) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => save_xyz(path, ps),
        Some("ply") => save_ply(path, ps),
        other => Err(Error::Config(format!(
            "unsupported point cloud extension {other:?} for {}",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn bits(ps: &PointSet) -> Vec<u64> {
        ps.iter()
            .flat_map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            .collect()
    }

    #[test]
    fn xyz_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        let ps = random_cloud(91, 257);
        save_xyz(&path, &ps).unwrap();
        let loaded = load_xyz(&path).unwrap();
        assert_eq!(bits(&ps), bits(&loaded));
    }

    #[test]
    fn ply_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let ps = random_cloud(92, 123);
        save_ply(&path, &ps).unwrap();
        let loaded = load_ply(&path).unwrap();
        assert_eq!(bits(&ps), bits(&loaded));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.xyz");
        std::fs::write(&path, "").unwrap();
        assert!(load_xyz(&path).is_err());
    }

    #[test]
    fn three_point_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.xyz");
        std::fs::write(&path, "0 0 0\n1.5 -2.25 3\n-0.125 0.5 -1\n").unwrap();
        let ps = load_xyz(&path).unwrap();
        assert_eq!(ps.len(), 3);
        assert_eq!(ps.get(1), Vector3::new(1.5, -2.25, 3.0));
        assert_eq!(ps.get(2), Vector3::new(-0.125, 0.5, -1.0));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        std::fs::write(&path, "0 0 0\n1 2\n3 4 5\n").unwrap();
        match load_xyz(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ply_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ply");
        let ps = random_cloud(93, 10);
        save_ply(&path, &ps).unwrap();
        let data = std::fs::read(&path).unwrap();
        std::fs::write(&path, &data[..data.len() - 4]).unwrap();
        assert!(load_ply(&path).is_err());
    }
}
