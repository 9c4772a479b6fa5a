//! Multi-view datasets and their on-disk layout.
//!
//! A dataset directory holds `cameras.json`, one `view_%03d.png` per view and
//! one `depth_%03d.pfm` per view (little-endian float32, rows bottom to top).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, Vec3};

/// RGB image, row-major `[height, width, 3]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// 8-bit encoding, rounding half up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Channel-first copy `[3, h, w]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = enc.write_header().map_err(fmt)?;
        w.write_image_data(&self.to_rgb8()).map_err(fmt)?;
        w.finish().map_err(fmt)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| fmt(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| fmt("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(fmt(format!("unsupported color type {other:?}"))),
        };
        Ok(Self::from_rgb8(w, h, &rgb))
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: usize,
    pub image: Image,
    pub camera: Camera,
    /// Camera-frame depth of the first hit per pixel, 0 where nothing is hit.
    pub depth: Vec<f32>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<View>,
    pub near: f64,
    pub far: f64,
}

impl SceneDataset {
    pub fn width(&self) -> usize {
        self.views[0].camera.width
    }

    pub fn height(&self) -> usize {
        self.views[0].camera.height
    }

    pub fn view(&self, id: usize) -> Result<&View> {
        self.views
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::invalid(format!("no view with id {id}")))
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.views.iter().filter(|v| v.split == split).map(|v| v.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::invalid("dataset has no views"))?;
        let (w, h) = (first.camera.width, first.camera.height);
        for v in &self.views {
            v.camera.validate()?;
            if v.camera.width != w || v.camera.height != h {
                return Err(Error::invalid(format!("view {} resolution differs from view {}", v.id, first.id)));
            }
            if v.image.width != w || v.image.height != h || v.depth.len() != w * h {
                return Err(Error::invalid(format!("view {} image or depth size does not match its camera", v.id)));
            }
        }
        Ok(())
    }

    /// Point closest (least squares) to all optical axes; the mean camera
    /// center if the axes are near parallel.
    pub fn centroid(&self) -> Vec3 {
        let mut a = Mat3::zeros();
        let mut b = Vec3::zeros();
        for v in &self.views {
            let d = v.camera.principal_axis();
            let p = Mat3::identity() - d * d.transpose();
            a += p;
            b += p * v.camera.center();
        }
        let mean = self.views.iter().map(|v| v.camera.center()).sum::<Vec3>() / self.views.len() as f64;
        match a.try_inverse() {
            Some(inv) if a.determinant().abs() > 1e-6 => inv * b,
            _ => mean,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: usize,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    near: f64,
    far: f64,
    views: Vec<CameraRecord>,
}

fn row_major(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("view_{id:03}.png"))
}

pub fn depth_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("depth_{id:03}.pfm"))
}

pub fn save_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cams = CamerasFile {
        near: ds.near,
        far: ds.far,
        views: ds
            .views
            .iter()
            .map(|v| CameraRecord {
                id: v.id,
                k: row_major(&v.camera.k),
                r: row_major(&v.camera.r),
                t: [v.camera.t.x, v.camera.t.y, v.camera.t.z],
                width: v.camera.width,
                height: v.camera.height,
                near: v.camera.near,
                far: v.camera.far,
                split: v.split,
            })
            .collect(),
    };
    let path = dir.join("cameras.json");
    fs::write(&path, serde_json::to_string_pretty(&cams)?).map_err(|e| Error::io(&path, e))?;
    for v in &ds.views {
        v.image.save_png(&image_path(dir, v.id))?;
        write_pfm(&depth_path(dir, v.id), v.camera.width, v.camera.height, &v.depth)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let path = dir.join("cameras.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cams: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut views = Vec::with_capacity(cams.views.len());
    for rec in cams.views {
        let camera = Camera::new(
            Mat3::from_row_slice(&rec.k),
            Mat3::from_row_slice(&rec.r),
            Vec3::from_row_slice(&rec.t),
            rec.width,
            rec.height,
            rec.near,
            rec.far,
        )
        .map_err(|e| Error::Format {
            path: path.clone(),
            reason: format!("view {}: {e}", rec.id),
        })?;
        let (ip, dp) = (image_path(dir, rec.id), depth_path(dir, rec.id));
        for p in [&ip, &dp] {
            if !p.exists() {
                return Err(Error::MissingView {
                    id: rec.id,
                    path: p.clone(),
                });
            }
        }
        let image = Image::load_png(&ip)?;
        let (w, h, depth) = read_pfm(&dp)?;
        if (image.width, image.height) != (rec.width, rec.height) || (w, h) != (rec.width, rec.height) {
            return Err(Error::Format {
                path: ip,
                reason: format!("view {}: file resolution does not match cameras.json", rec.id),
            });
        }
        views.push(View {
            id: rec.id,
            image,
            camera,
            depth,
            split: rec.split,
        });
    }
    let ds = SceneDataset {
        views,
        near: cams.near,
        far: cams.far,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a single-channel little-endian PFM (rows bottom to top).
pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "Pf\n{width} {height}\n-1.0\n").map_err(io)?;
    for row in (0..height).rev() {
        for v in &data[row * width..(row + 1) * width] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PFM header"))?);
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(bad("expected single-channel 'Pf' PFM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad PFM width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| bad("bad PFM scale"))?;
    let little = scale < 0.0;
    let body = bytes.get(pos..).ok_or_else(|| bad("truncated PFM body"))?;
    if body.len() < 4 * w * h {
        return Err(bad("truncated PFM body"));
    }
    let mut out = vec![0.0; w * h];
    for (i, c) in body.chunks_exact(4).take(w * h).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (h - 1 - i / w, i % w);
        out[row * w + col] = v;
    }
    Ok((w, h, out))
}
