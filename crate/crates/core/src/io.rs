//! File formats: PFM images, PGM masks, binary PLY clouds, camera and
//! light text files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use diffcore::Tensor;
use nalgebra::Matrix4;

use crate::error::{format_err, IoContext, Result};
use crate::geometry::{Camera, Mat3, Vec3};

/// Reads one whitespace-delimited token from a binary header.
fn token(r: &mut impl BufRead) -> std::io::Result<String> {
    let mut out = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if out.is_empty() {
                continue;
            }
            break;
        }
        out.push(byte[0]);
    }
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn parse<T: std::str::FromStr>(what: &'static str, s: &str) -> Result<T> {
    s.parse().map_err(|_| format_err(what, format!("cannot parse {s:?}")))
}

/// Writes `[H,W]` (grayscale) or `[3,H,W]` (colour) as little-endian PFM.
pub fn write_pfm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match image.shape() {
        [h, w] => (1, *h, *w),
        [3, h, w] => (3, *h, *w),
        s => return Err(format_err("PFM", format!("cannot store shape {s:?}"))),
    };
    let mut buf = Vec::with_capacity(32 + 4 * image.numel());
    write!(buf, "{}\n{w} {h}\n-1\n", if c == 3 { "PF" } else { "Pf" }).at(path)?;
    let plane = h * w;
    let d = image.data();
    // Rows run bottom to top.
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                buf.extend_from_slice(&d[ch * plane + y * w + x].to_le_bytes());
            }
        }
    }
    fs::write(path, buf).at(path)
}

/// Inverse of [`write_pfm`]; also accepts big-endian files.
pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(fs::File::open(path).at(path)?);
    let magic = token(&mut r).at(path)?;
    let c = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(format_err("PFM", format!("{}: bad magic {m:?}", path.display()))),
    };
    let w: usize = parse("PFM width", &token(&mut r).at(path)?)?;
    let h: usize = parse("PFM height", &token(&mut r).at(path)?)?;
    let scale: f64 = parse("PFM scale", &token(&mut r).at(path)?)?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; 4 * c * h * w];
    r.read_exact(&mut raw)
        .map_err(|e| format_err("PFM", format!("{}: truncated payload: {e}", path.display())))?;
    let plane = h * w;
    let mut data = vec![0f32; c * plane];
    for (i, b) in raw.chunks_exact(4).enumerate() {
        let b = [b[0], b[1], b[2], b[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (pix, ch) = (i / c, i % c);
        let (row, x) = (pix / w, pix % w);
        data[ch * plane + (h - 1 - row) * w + x] = v;
    }
    let shape = if c == 1 { vec![h, w] } else { vec![3, h, w] };
    Ok(Tensor::new(shape, data)?)
}

/// Binary mask as an 8-bit P5 PGM (255 = set).
pub fn write_pgm(path: &Path, mask: &[bool], size: (usize, usize)) -> Result<()> {
    let (h, w) = size;
    if mask.len() != h * w {
        return Err(format_err("PGM", format!("mask of {} for {h}x{w}", mask.len())));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, buf).at(path)
}

/// Returns the mask (nonzero pixels) and `(height, width)`.
pub fn read_pgm(path: &Path) -> Result<(Vec<bool>, (usize, usize))> {
    let mut r = BufReader::new(fs::File::open(path).at(path)?);
    if token(&mut r).at(path)? != "P5" {
        return Err(format_err("PGM", format!("{}: expected P5", path.display())));
    }
    let w: usize = parse("PGM width", &token(&mut r).at(path)?)?;
    let h: usize = parse("PGM height", &token(&mut r).at(path)?)?;
    let maxval: usize = parse("PGM maxval", &token(&mut r).at(path)?)?;
    if maxval > 255 {
        return Err(format_err("PGM", "only 8-bit masks are supported"));
    }
    let mut raw = vec![0u8; h * w];
    r.read_exact(&mut raw)
        .map_err(|e| format_err("PGM", format!("{}: truncated payload: {e}", path.display())))?;
    Ok((raw.into_iter().map(|v| v != 0).collect(), (h, w)))
}

/// Points with unit normals, index-aligned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrientedPointCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: OrientedPointCloud) {
        self.points.extend(other.points);
        self.normals.extend(other.normals);
    }
}

/// Binary little-endian PLY with `x y z nx ny nz` as `f32`.
pub fn write_ply(path: &Path, cloud: &OrientedPointCloud) -> Result<()> {
    if cloud.points.len() != cloud.normals.len() {
        return Err(format_err("PLY", "points and normals differ in length"));
    }
    let mut w = BufWriter::new(fs::File::create(path).at(path)?);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\nend_header\n",
        cloud.len()
    );
    w.write_all(header.as_bytes()).at(path)?;
    for (p, n) in cloud.points.iter().zip(&cloud.normals) {
        for v in [p.x, p.y, p.z, n.x, n.y, n.z] {
            w.write_all(&(v as f32).to_le_bytes()).at(path)?;
        }
    }
    w.flush().at(path)
}

pub fn read_ply(path: &Path) -> Result<OrientedPointCloud> {
    let mut r = BufReader::new(fs::File::open(path).at(path)?);
    let mut count = None;
    let mut props = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).at(path)? == 0 {
            return Err(format_err("PLY", "missing end_header"));
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", f, _] if *f != "binary_little_endian" => {
                return Err(format_err("PLY", format!("unsupported format {f}")));
            }
            ["element", "vertex", n] => count = Some(parse::<usize>("PLY vertex count", n)?),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, _] => return Err(format_err("PLY", format!("unsupported property type {ty}"))),
            _ => {}
        }
    }
    if props != ["x", "y", "z", "nx", "ny", "nz"] {
        return Err(format_err("PLY", format!("unexpected properties {props:?}")));
    }
    let n = count.ok_or_else(|| format_err("PLY", "no vertex element"))?;
    let mut raw = vec![0u8; n * 24];
    r.read_exact(&mut raw)
        .map_err(|e| format_err("PLY", format!("{}: truncated payload: {e}", path.display())))?;
    let mut cloud = OrientedPointCloud::default();
    for rec in raw.chunks_exact(24) {
        let f: Vec<f64> = rec
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        cloud.points.push(Vec3::new(f[0], f[1], f[2]));
        cloud.normals.push(Vec3::new(f[3], f[4], f[5]));
    }
    Ok(cloud)
}

/// Camera text file: `extrinsic` with the 4×4 world-to-camera matrix,
/// written with 9 significant digits,
/// `intrinsic` with K, then `d_min d_interval d_max`, then the image size.
pub fn format_camera(cam: &Camera) -> String {
    let m = cam.world_to_camera();
    let mut s = String::from("extrinsic\n");
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.8e}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s.push_str("\nintrinsic\n");
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{:.8e}", cam.k[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    let (lo, hi) = cam.depth_range;
    s.push_str(&format!("\n{lo:.8e} {:.8e} {hi:.8e}\n", hi - lo));
    s.push_str(&format!("{} {}\n", cam.size.0, cam.size.1));
    s
}

/// Parses [`format_camera`] output; whitespace is free-form. When the image
/// size line is missing `default_size` is used.
pub fn parse_camera(text: &str, default_size: Option<(usize, usize)>) -> Result<Camera> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut pos = 0;
    let mut next = |what: &'static str| -> Result<&str> {
        let t = tokens.get(pos).ok_or_else(|| format_err("camera", format!("missing {what}")))?;
        pos += 1;
        Ok(t)
    };
    if next("\"extrinsic\"")? != "extrinsic" {
        return Err(format_err("camera", "expected \"extrinsic\""));
    }
    let mut m = Matrix4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            m[(r, c)] = parse("extrinsic entry", next("extrinsic entry")?)?;
        }
    }
    if next("\"intrinsic\"")? != "intrinsic" {
        return Err(format_err("camera", "expected \"intrinsic\""));
    }
    let mut k = Mat3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            k[(r, c)] = parse("intrinsic entry", next("intrinsic entry")?)?;
        }
    }
    let lo: f64 = parse("d_min", next("d_min")?)?;
    let _interval: f64 = parse("d_interval", next("d_interval")?)?;
    let hi: f64 = parse("d_max", next("d_max")?)?;
    let size = match (next("height"), next("width")) {
        (Ok(h), Ok(w)) => (parse("image height", h)?, parse("image width", w)?),
        _ => default_size.ok_or_else(|| format_err("camera", "missing image size"))?,
    };
    Camera::from_world_to_camera(&m, k, (lo, hi), size)
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    fs::write(path, format_camera(cam)).at(path)
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    parse_camera(&fs::read_to_string(path).at(path)?, None)
}

/// One unit vector per line.
pub fn write_lights(path: &Path, dirs: &[Vec3]) -> Result<()> {
    let s: String = dirs.iter().map(|d| format!("{:.8e} {:.8e} {:.8e}\n", d.x, d.y, d.z)).collect();
    fs::write(path, s).at(path)
}

pub fn read_lights(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| parse("light component", t))
                .collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(format_err("lights", format!("expected 3 components in {l:?}")));
            }
            Ok(Vec3::new(v[0], v[1], v[2]))
        })
        .collect()
}
