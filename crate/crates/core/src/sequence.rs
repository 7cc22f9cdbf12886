//! Frames plus per-frame ground truth, and the on-disk directory format:
//! numbered image files next to a `groundtruth.txt` with one box per line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Frame};

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> (u32, u32) {
        self.frames.first().map_or((0, 0), |f| f.dimensions())
    }
}

/// Parses one ground-truth line: `x,y,w,h` or the 8-number polygon
/// `x1,y1,...,x4,y4`, separated by commas and/or whitespace. Polygons
/// become their axis-aligned bounding box.
pub fn parse_box_line(line: &str) -> std::result::Result<BBox, String> {
    let values: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    let b = match values.len() {
        4 => BBox::new(values[0], values[1], values[2], values[3]),
        8 => {
            let pts: Vec<(f64, f64)> = values.chunks(2).map(|p| (p[0], p[1])).collect();
            BBox::bounding(&pts).expect("four points")
        }
        n => return Err(format!("expected 4 or 8 numbers, found {n}")),
    };
    if !b.is_finite() {
        return Err("non-finite coordinate".into());
    }
    if b.w < 0.0 || b.h < 0.0 {
        return Err(format!("negative box size {}x{}", b.w, b.h));
    }
    Ok(b)
}

pub fn parse_groundtruth(path: &Path, text: &str) -> Result<Vec<BBox>> {
    let lines: Vec<&str> = text.lines().collect();
    let end = lines.iter().rposition(|l| !l.trim().is_empty()).map_or(0, |i| i + 1);
    lines[..end]
        .iter()
        .enumerate()
        .map(|(i, line)| {
            parse_box_line(line).map_err(|detail| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            })
        })
        .collect()
}

fn numbered_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(n) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) {
            found.push((n, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let boxes = parse_groundtruth(&gt_path, &text)?;
    let images = numbered_images(dir)?;
    if images.len() != boxes.len() {
        return Err(Error::Sequence {
            path: dir.to_path_buf(),
            detail: format!("{} frames but {} ground-truth lines", images.len(), boxes.len()),
        });
    }
    if images.is_empty() {
        return Err(Error::Sequence {
            path: dir.to_path_buf(),
            detail: "no frames".into(),
        });
    }
    let frames = images
        .iter()
        .map(|p| {
            image::open(p)
                .map(|img| img.to_rgb8())
                .map_err(|source| Error::Image {
                    path: p.clone(),
                    source,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let size = frames[0].dimensions();
    if let Some(i) = frames.iter().position(|f| f.dimensions() != size) {
        return Err(Error::Sequence {
            path: images[i].clone(),
            detail: format!("frame size {:?} differs from first frame {:?}", frames[i].dimensions(), size),
        });
    }
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sequence")
        .to_string();
    Ok(SequenceRecord { name, frames, boxes })
}

pub fn format_box(b: &BBox) -> String {
    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format_box(b));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes frames as `00000001.png, ...` and the ground truth file.
/// Box coordinates are printed with round-trip precision.
pub fn save_sequence(seq: &SequenceRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let path = dir.join(format!("{:08}.png", i + 1));
        frame.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    write_boxes(&dir.join(GROUNDTRUTH_FILE), &seq.boxes)
}

/// Sequence directories under `root`, sorted by name. `root` itself counts
/// when it holds a ground-truth file.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(GROUNDTRUTH_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(GROUNDTRUTH_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_and_polygon_forms() {
        assert_eq!(parse_box_line("10,20,30,40").unwrap(), BBox::new(10.0, 20.0, 30.0, 40.0));
        assert_eq!(parse_box_line("10 20\t30 40").unwrap(), BBox::new(10.0, 20.0, 30.0, 40.0));
        assert_eq!(
            parse_box_line("0,0, 4,0, 4,2, 0,2").unwrap(),
            BBox::new(0.0, 0.0, 4.0, 2.0)
        );
    }

    #[test]
    fn rotated_square_bounds_its_diagonal() {
        // unit-side square centered at the origin, rotated 45 degrees
        let h = std::f64::consts::SQRT_2 / 2.0;
        let line = format!("{h},0,0,{h},-{h},0,0,-{h}");
        let b = parse_box_line(&line).unwrap();
        assert!((b.w - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((b.h - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let err = parse_groundtruth(Path::new("gt.txt"), "1,2,3,4\n1,2,x,4\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(parse_box_line("1,2,3").is_err());
        assert!(parse_box_line("1,2,-3,4").is_err());
        // trailing blank lines are tolerated
        assert_eq!(parse_groundtruth(Path::new("gt"), "1,2,3,4\n\n").unwrap().len(), 1);
    }
}
