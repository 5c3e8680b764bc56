//! On-disk formats: JSON Lines detection/ground-truth records, dataset
//! manifests and SVG overlays.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point, Polygon, Polyline};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad record on line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

/// One instance in a JSONL record. Ground truth omits `score`; the
/// generator also stores the true spine to avoid recomputing center lines
/// during training.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Entry {
    /// Closed polygon, [x, y] pairs.
    pub polygon: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spine: Option<Vec<[f64; 2]>>,
}

/// One image's worth of detections or ground truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Record {
    pub image_id: String,
    pub detections: Vec<Entry>,
}

impl Entry {
    pub fn from_polygon(poly: &Polygon, score: Option<f64>) -> Self {
        Entry {
            polygon: poly.vertices.iter().map(|p| [p.x, p.y]).collect(),
            score,
            spine: None,
        }
    }

    pub fn to_polygon(&self) -> crate::geometry::Result<Polygon> {
        Polygon::new(self.polygon.iter().map(|&[x, y]| Point::new(x, y)).collect())
    }

    pub fn spine_polyline(&self) -> Option<Polyline> {
        self.spine.as_ref().map(|s| Polyline {
            points: s.iter().map(|&[x, y]| Point::new(x, y)).collect(),
        })
    }
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| IoError::Invalid(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| IoError::BadRecord {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    /// Path relative to the manifest file.
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Ground-truth JSONL path relative to the manifest.
    pub gt_file: String,
    pub images: Vec<ManifestImage>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| IoError::Invalid(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| IoError::Invalid(e.to_string()))
    }
}

/// Per-instance overlay layers for one image.
#[derive(Debug, Clone, Default)]
pub struct OverlayInstance {
    pub rough: Option<Vec<Point>>,
    pub center: Option<Vec<Point>>,
    pub refined: Option<Vec<Point>>,
}

/// Writes an SVG with the raster image (embedded as base64 PNG when
/// given) and one colored layer per geometry kind: rough contours in
/// orange, center lines in blue, refined contours in green.
pub fn write_overlay_svg(
    path: &Path,
    width: usize,
    height: usize,
    png_bytes: Option<&[u8]>,
    instances: &[OverlayInstance],
) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    if let Some(bytes) = png_bytes {
        s.push_str(&format!(
            "<image width=\"{width}\" height=\"{height}\" href=\"data:image/png;base64,{}\"/>\n",
            base64(bytes)
        ));
    }
    let poly_points = |pts: &[Point]| -> String {
        pts.iter()
            .map(|p| format!("{:.2},{:.2}", p.x, p.y))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for (layer, color, closed) in [
        ("rough", "#e08020", true),
        ("center", "#2060e0", false),
        ("refined", "#20a040", true),
    ] {
        s.push_str(&format!("<g id=\"{layer}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1\">\n"));
        for inst in instances {
            let pts = match layer {
                "rough" => &inst.rough,
                "center" => &inst.center,
                _ => &inst.refined,
            };
            if let Some(pts) = pts {
                if closed {
                    s.push_str(&format!("<polygon points=\"{}\"/>\n", poly_points(pts)));
                } else {
                    s.push_str(&format!("<polyline points=\"{}\"/>\n", poly_points(pts)));
                }
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}

fn base64(bytes: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [
            chunk[0],
            chunk.get(1).copied().unwrap_or(0),
            chunk.get(2).copied().unwrap_or(0),
        ];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 {
            TABLE[(n >> 6) as usize & 63] as char
        } else {
            '='
        });
        out.push(if chunk.len() > 2 {
            TABLE[n as usize & 63] as char
        } else {
            '='
        });
    }
    out
}

/// Loads a PNG as 8-bit grayscale, converting if needed.
pub fn load_gray_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| IoError::Invalid(format!("png read {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

pub fn save_gray_png(
    path: &Path,
    pixels: &[u8],
    height: usize,
    width: usize,
) -> Result<()> {
    let img: image::GrayImage =
        image::ImageBuffer::from_raw(width as u32, height as u32, pixels.to_vec())
            .ok_or_else(|| IoError::Invalid("pixel buffer does not match extents".into()))?;
    img.save(path)
        .map_err(|e| IoError::Invalid(format!("png write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        let records = vec![
            Record {
                image_id: "a".into(),
                detections: vec![Entry {
                    polygon: vec![[0.0, 0.0], [4.0, 0.0], [4.0, 2.0], [0.0, 2.0]],
                    score: Some(0.75),
                    spine: None,
                }],
            },
            Record {
                image_id: "b".into(),
                detections: vec![],
            },
        ];
        write_jsonl(&path, &records).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn gt_records_omit_score_field() {
        let r = Record {
            image_id: "x".into(),
            detections: vec![Entry {
                polygon: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
                score: None,
                spine: None,
            }],
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("score"));
        assert!(!json.contains("spine"));
    }

    #[test]
    fn svg_is_well_formed() {
        use crate::geometry::Point;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.svg");
        let inst = OverlayInstance {
            rough: Some(vec![
                Point::new(1.0, 1.0),
                Point::new(5.0, 1.0),
                Point::new(5.0, 4.0),
            ]),
            center: Some(vec![Point::new(2.0, 2.0), Point::new(4.0, 2.0)]),
            refined: None,
        };
        write_overlay_svg(&path, 10, 10, Some(b"pngdata"), &[inst]).unwrap();
        let s = std::fs::read_to_string(&path).unwrap();
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<g ").count(), s.matches("</g>").count());
        assert!(s.contains("<polygon"));
        assert!(s.contains("<polyline"));
        assert!(s.contains("base64"));
    }

    #[test]
    fn base64_known_vectors() {
        assert_eq!(base64(b"foo"), "Zm9v");
        assert_eq!(base64(b"foob"), "Zm9vYg==");
        assert_eq!(base64(b"fooba"), "Zm9vYmE=");
    }
}
