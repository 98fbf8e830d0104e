//! Cloud file formats: ASCII PLY and the `ASTC1` table-binary container.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cloud, Vec3};
use crate::error::{Error, Result};

pub(crate) const CLOUD_MAGIC: &[u8; 5] = b"ASTC1";
const FLAG_NORMALS: u8 = 1;
const FLAG_SEMANTIC: u8 = 2;
const FLAG_INSTANCE: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    PlyAscii,
    TableBinary,
}

impl CloudFormat {
    /// Guess from the file extension: `.ply` is ASCII PLY, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => CloudFormat::PlyAscii,
            _ => CloudFormat::TableBinary,
        }
    }
}

fn scene_from_path(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scene")
        .to_string()
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<Cloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let cloud = read_cloud(BufReader::new(file), format, &scene_from_path(path))?;
    Ok(cloud)
}

pub fn save_cloud(cloud: &Cloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidParameter("empty output path".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_cloud(cloud, &mut w, format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a cloud; `default_scene` is used when the file does not name one.
pub fn read_cloud<R: BufRead>(reader: R, format: CloudFormat, default_scene: &str) -> Result<Cloud> {
    match format {
        CloudFormat::PlyAscii => read_ply(reader, default_scene),
        CloudFormat::TableBinary => read_binary(reader, default_scene),
    }
}

pub fn write_cloud<W: Write>(cloud: &Cloud, writer: &mut W, format: CloudFormat) -> Result<()> {
    let io = |e| Error::io("<stream>", e);
    match format {
        CloudFormat::PlyAscii => write_ply(cloud, writer).map_err(io),
        CloudFormat::TableBinary => write_binary(cloud, writer).map_err(io),
    }
}

// --- PLY -------------------------------------------------------------------

fn write_ply<W: Write>(cloud: &Cloud, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment scene {}", cloud.scene_id())?;
    if let Some(names) = cloud.class_names() {
        writeln!(w, "comment classes {}", names.join(" "))?;
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(w, "property uchar {p}")?;
    }
    if cloud.normals().is_some() {
        for p in ["nx", "ny", "nz"] {
            writeln!(w, "property float {p}")?;
        }
    }
    if cloud.gt_semantic().is_some() {
        writeln!(w, "property int semantic")?;
    }
    if cloud.gt_instance().is_some() {
        writeln!(w, "property int instance")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let c = cloud.colors()[i];
        let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        write!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], q(c[0]), q(c[1]), q(c[2]))?;
        if let Some(n) = cloud.normals() {
            write!(w, " {} {} {}", n[i][0], n[i][1], n[i][2])?;
        }
        if let Some(s) = cloud.gt_semantic() {
            write!(w, " {}", s[i])?;
        }
        if let Some(s) = cloud.gt_instance() {
            write!(w, " {}", s[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn read_ply<R: BufRead>(reader: R, default_scene: &str) -> Result<Cloud> {
    let mut lines = reader.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::parse(format!("line {}", i + 1), e.to_string())),
            None => Err(Error::parse("end of file", format!("truncated file, expected {what}"))),
        }
    };

    let (ln, magic) = next_line("`ply` magic")?;
    if magic.trim() != "ply" {
        return Err(Error::parse(format!("line {ln}"), "malformed header: missing `ply` magic"));
    }
    let mut scene = default_scene.to_string();
    let mut class_names: Option<Vec<String>> = None;
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    loop {
        let (ln, line) = next_line("`end_header`")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::parse(
                    format!("line {ln}"),
                    format!("unsupported PLY format `{other}`"),
                ))
            }
            ["comment", "scene", id, ..] => scene = id.to_string(),
            ["comment", "classes", names @ ..] => {
                class_names = Some(names.iter().map(|s| s.to_string()).collect())
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count.parse().map_err(|_| {
                        Error::parse(format!("line {ln}"), format!("bad vertex count `{count}`"))
                    })?);
                } else {
                    return Err(Error::parse(
                        format!("line {ln}"),
                        format!("unsupported element `{name}`"),
                    ));
                }
            }
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            _ => {
                return Err(Error::parse(
                    format!("line {ln}"),
                    format!("malformed header line `{line}`"),
                ))
            }
        }
    }
    let n = vertex_count
        .ok_or_else(|| Error::parse("header", "malformed header: no `element vertex`"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let required = ["x", "y", "z", "red", "green", "blue"];
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(required) {
        *slot = col(name).ok_or_else(|| Error::MissingProperty(name.to_string()))?;
    }
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        (None, None, None) => None,
        _ => return Err(Error::MissingProperty("nx/ny/nz".into())),
    };
    let sem_col = col("semantic");
    let inst_col = col("instance");

    let mut positions: Vec<Vec3> = Vec::with_capacity(n);
    let mut colors: Vec<Vec3> = Vec::with_capacity(n);
    let mut normals: Vec<Vec3> = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    let mut fields: Vec<f64> = Vec::with_capacity(props.len());
    for _ in 0..n {
        let (ln, line) = next_line("vertex data")?;
        let at = || format!("line {ln}");
        fields.clear();
        for tok in line.split_whitespace() {
            fields.push(
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(at(), format!("bad number `{tok}`")))?,
            );
        }
        if fields.len() != props.len() {
            return Err(Error::parse(
                at(),
                format!("expected {} values, found {}", props.len(), fields.len()),
            ));
        }
        positions.push([fields[idx[0]] as f32, fields[idx[1]] as f32, fields[idx[2]] as f32]);
        let mut rgb = [0f32; 3];
        for (k, slot) in rgb.iter_mut().enumerate() {
            let v = fields[idx[3 + k]];
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::parse(at(), format!("color value {v} outside 0..=255")));
            }
            *slot = (v / 255.0) as f32;
        }
        colors.push(rgb);
        if let Some(nc) = normal_cols {
            normals.push([fields[nc[0]] as f32, fields[nc[1]] as f32, fields[nc[2]] as f32]);
        }
        for (col, out, what) in [(sem_col, &mut semantic, "class"), (inst_col, &mut instance, "instance")] {
            if let Some(c) = col {
                let v = fields[c];
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    return Err(Error::parse(at(), format!("invalid {what} id {v}")));
                }
                out.push(v as u32);
            }
        }
    }

    let mut cloud = Cloud::new(scene, positions, colors)?;
    if normal_cols.is_some() {
        cloud = cloud.with_normals(normals)?;
    }
    if sem_col.is_some() {
        cloud = cloud.with_semantic(semantic, class_names.clone())?;
    } else if let Some(names) = class_names {
        cloud = cloud.with_class_names(names)?;
    }
    if inst_col.is_some() {
        cloud = cloud.with_instances(instance)?;
    }
    Ok(cloud)
}

// --- table-binary ----------------------------------------------------------

fn write_binary<W: Write>(cloud: &Cloud, w: &mut W) -> std::io::Result<()> {
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    let c = cloud.class_names().map_or(0, |n| n.len() as u32);
    w.write_all(&c.to_le_bytes())?;
    let mut flags = 0u8;
    if cloud.normals().is_some() {
        flags |= FLAG_NORMALS;
    }
    if cloud.gt_semantic().is_some() {
        flags |= FLAG_SEMANTIC;
    }
    if cloud.gt_instance().is_some() {
        flags |= FLAG_INSTANCE;
    }
    w.write_all(&[flags])?;
    let put3 = |w: &mut W, vs: &[Vec3]| -> std::io::Result<()> {
        for v in vs {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    };
    put3(w, cloud.positions())?;
    put3(w, cloud.colors())?;
    if let Some(n) = cloud.normals() {
        put3(w, n)?;
    }
    for ids in [cloud.gt_semantic(), cloud.gt_instance()].into_iter().flatten() {
        for &v in ids {
            w.write_all(&(v as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct ByteReader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> ByteReader<R> {
    fn take<const B: usize>(&mut self) -> Result<[u8; B]> {
        let mut buf = [0u8; B];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::parse(format!("byte {}", self.offset), "truncated payload")
        })?;
        self.offset += B;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn vec3s(&mut self, n: usize) -> Result<Vec<Vec3>> {
        (0..n)
            .map(|_| Ok([self.f32()?, self.f32()?, self.f32()?]))
            .collect()
    }

    fn ids(&mut self, n: usize, what: &str, bound: Option<u32>) -> Result<Vec<u32>> {
        (0..n)
            .map(|_| {
                let at = self.offset;
                let v = i32::from_le_bytes(self.take()?);
                if v < 0 || bound.is_some_and(|b| v as u32 >= b) {
                    return Err(Error::parse(format!("byte {at}"), format!("{what} id {v} out of range")));
                }
                Ok(v as u32)
            })
            .collect()
    }
}

fn read_binary<R: Read>(reader: R, default_scene: &str) -> Result<Cloud> {
    let mut r = ByteReader {
        inner: reader,
        offset: 0,
    };
    let magic: [u8; 5] = r.take()?;
    if &magic != CLOUD_MAGIC {
        return Err(Error::parse("byte 0", "malformed header: bad magic"));
    }
    let n = r.u32()? as usize;
    let c = r.u32()?;
    let flags = r.take::<1>()?[0];
    if flags & !(FLAG_NORMALS | FLAG_SEMANTIC | FLAG_INSTANCE) != 0 {
        return Err(Error::parse("byte 13", format!("unknown flags {flags:#04x}")));
    }
    let positions = r.vec3s(n)?;
    let color_start = r.offset;
    let colors = r.vec3s(n)?;
    if let Some(i) = colors
        .iter()
        .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
    {
        return Err(Error::parse(
            format!("byte {}", color_start + i * 12),
            "color outside [0,1]",
        ));
    }
    let normals = if flags & FLAG_NORMALS != 0 { Some(r.vec3s(n)?) } else { None };
    let bound = (c > 0).then_some(c);
    let semantic = if flags & FLAG_SEMANTIC != 0 { Some(r.ids(n, "class", bound)?) } else { None };
    let instance = if flags & FLAG_INSTANCE != 0 { Some(r.ids(n, "instance", None)?) } else { None };

    let mut cloud = Cloud::new(default_scene, positions, colors)?;
    if let Some(ns) = normals {
        cloud = cloud.with_normals(ns)?;
    }
    let names = bound.map(|c| (0..c).map(|i| format!("class{i}")).collect::<Vec<_>>());
    match (semantic, names) {
        (Some(s), names) => cloud = cloud.with_semantic(s, names)?,
        (None, Some(names)) => cloud = cloud.with_class_names(names)?,
        (None, None) => {}
    }
    if let Some(ids) = instance {
        cloud = cloud.with_instances(ids)?;
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    const THREE_POINTS: &str = "ply\nformat ascii 1.0\nelement vertex 3\n\
        property float x\nproperty float y\nproperty float z\n\
        property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n\
        0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0.5 0 0 51\n";

    #[test]
    fn reads_minimal_ascii_ply() {
        let c = read_cloud(Cursor::new(THREE_POINTS), CloudFormat::PlyAscii, "s").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.colors()[0], [1.0, 0.0, 0.0]);
        assert_eq!(c.colors()[2][2], 0.2);
        assert_eq!(c.positions()[2], [0.0, 1.0, 0.5]);
        assert!(c.normals().is_none());
    }

    #[test]
    fn missing_property_is_named() {
        let text = THREE_POINTS.replace("property float x\n", "");
        let err = read_cloud(Cursor::new(text), CloudFormat::PlyAscii, "s").unwrap_err();
        assert!(matches!(&err, Error::MissingProperty(p) if p == "x"), "{err}");
        assert!(err.to_string().contains("missing property"));
    }

    #[test]
    fn color_out_of_range_reports_line() {
        let text = THREE_POINTS.replace("0 1 0.5 0 0 51", "0 1 0.5 0 0 300");
        let err = read_cloud(Cursor::new(text), CloudFormat::PlyAscii, "s").unwrap_err();
        assert!(err.to_string().contains("line 13"), "{err}");
    }

    #[test]
    fn truncated_inputs_are_errors() {
        let text: String = THREE_POINTS.lines().take(11).collect::<Vec<_>>().join("\n");
        assert!(read_cloud(Cursor::new(text), CloudFormat::PlyAscii, "s").is_err());

        let cloud = read_cloud(Cursor::new(THREE_POINTS), CloudFormat::PlyAscii, "s").unwrap();
        let mut buf = Vec::new();
        write_cloud(&cloud, &mut buf, CloudFormat::TableBinary).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_cloud(Cursor::new(buf), CloudFormat::TableBinary, "s").unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }

    #[test]
    fn normals_written_as_properties() {
        let cloud = read_cloud(Cursor::new(THREE_POINTS), CloudFormat::PlyAscii, "s")
            .unwrap()
            .with_normals(vec![[0.0, 0.0, 1.0]; 3])
            .unwrap();
        let mut buf = Vec::new();
        write_cloud(&cloud, &mut buf, CloudFormat::PlyAscii).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        for p in ["nx", "ny", "nz"] {
            assert!(text.contains(&format!("property float {p}\n")));
        }
        let back = read_cloud(Cursor::new(buf), CloudFormat::PlyAscii, "x").unwrap();
        assert_eq!(back, cloud);
    }

    #[test]
    fn empty_path_is_rejected() {
        let cloud = read_cloud(Cursor::new(THREE_POINTS), CloudFormat::PlyAscii, "s").unwrap();
        assert!(save_cloud(&cloud, "", CloudFormat::TableBinary).is_err());
    }

    #[test]
    fn binary_rejects_bad_magic_and_class_overflow() {
        assert!(read_cloud(Cursor::new(b"ASTC2\0\0\0\0".to_vec()), CloudFormat::TableBinary, "s").is_err());
        let cloud = Cloud::new("s", vec![[0.0; 3]], vec![[0.0; 3]])
            .unwrap()
            .with_semantic(vec![1], Some(vec!["a".into(), "b".into()]))
            .unwrap();
        let mut buf = Vec::new();
        write_cloud(&cloud, &mut buf, CloudFormat::TableBinary).unwrap();
        // patch C to 1 so the stored class 1 is out of range
        buf[9..13].copy_from_slice(&1u32.to_le_bytes());
        assert!(read_cloud(Cursor::new(buf), CloudFormat::TableBinary, "s").is_err());
    }
}
