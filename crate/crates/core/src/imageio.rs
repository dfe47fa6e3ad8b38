//! PNG and CSV readers/writers for the pipeline's on-disk artifacts.
//!
//! Images are 8-bit RGB PNG; label maps ([`LabelMap`]) are 8-bit grayscale
//! PNG with codes {0, 1.., 255=ignore}; instance masks are 16-bit grayscale
//! PNG; point sets are CSV with header `row,col,class,score`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{Grid, InstanceMask, LabelMap, Point, ScalarMap};
use crate::tensor::{Scalar, TensorData};

/// Whether a PNG stores 16-bit samples (instance masks) rather than 8-bit
/// (class labels).
pub fn png_is_16bit(path: impl AsRef<Path>) -> Result<bool> {
    let img = image::open(path.as_ref())?;
    Ok(matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    ))
}

/// Loads an RGB PNG as a `[1,3,H,W]` tensor with values in [0,1].
pub fn load_rgb<S: Scalar>(path: impl AsRef<Path>) -> Result<TensorData<S>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let inv = S::from_f64(1.0 / 255.0);
    let mut data = vec![S::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (r, c) = (y as usize, x as usize);
        for ch in 0..3 {
            data[ch * h * w + r * w + c] = S::from_f64(px.0[ch] as f64) * inv;
        }
    }
    TensorData::new(vec![1, 3, h, w], data)
}

/// Writes a `[1,3,H,W]` or `[3,H,W]` tensor in [0,1] as an RGB PNG.
pub fn save_rgb<S: Scalar>(path: impl AsRef<Path>, t: &TensorData<S>) -> Result<()> {
    let shape = t.shape();
    let (h, w) = match shape {
        [1, 3, h, w] | [3, h, w] => (*h, *w),
        _ => {
            return Err(Error::shape_mismatch(
                "save_rgb",
                "[1,3,H,W] or [3,H,W]",
                format!("{shape:?}"),
            ))
        }
    };
    let data = t.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let v = data[ch * h * w + r * w + c].to_f64().clamp(0.0, 1.0);
                px[ch] = (v * 255.0).round() as u8;
            }
            img.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    img.save(path.as_ref())?;
    Ok(())
}

/// Writes a row-major RGB8 buffer (length `3·h·w`, interleaved) as a PNG.
pub fn save_rgb8(path: impl AsRef<Path>, h: usize, w: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * h * w {
        return Err(Error::shape_mismatch(
            "save_rgb8",
            format!("{} bytes for {h}x{w} RGB", 3 * h * w),
            format!("{}", rgb.len()),
        ));
    }
    let img = RgbImage::from_raw(w as u32, h as u32, rgb.to_vec())
        .expect("raw buffer sized by construction");
    img.save(path.as_ref())?;
    Ok(())
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(h, w, img.into_raw())
}

pub fn save_label_map(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(map.w() as u32, map.h() as u32, map.data().to_vec())
        .expect("raw buffer sized by construction");
    img.save(path.as_ref())?;
    Ok(())
}

pub fn load_instance_mask(path: impl AsRef<Path>) -> Result<InstanceMask> {
    let img = image::open(path.as_ref())?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(h, w, img.into_raw())
}

pub fn save_instance_mask(path: impl AsRef<Path>, mask: &InstanceMask) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(mask.w() as u32, mask.h() as u32, mask.data().to_vec())
            .expect("raw buffer sized by construction");
    img.save(path.as_ref())?;
    Ok(())
}

pub fn load_points_csv(path: impl AsRef<Path>) -> Result<Vec<Point>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let mut points = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() < 4 {
            return Err(Error::format(
                "points-csv",
                format!("expected 4 fields `row,col,class,score`, got {}", record.len()),
            ));
        }
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::format("points-csv", format!("field {i}: {e}")))
        };
        points.push(Point {
            row: parse(0)?,
            col: parse(1)?,
            class: parse(2)? as u8,
            score: parse(3)? as f32,
        });
    }
    Ok(points)
}

pub fn save_points_csv(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    wtr.write_record(["row", "col", "class", "score"])?;
    for p in points {
        wtr.write_record([
            format!("{}", p.row),
            format!("{}", p.col),
            format!("{}", p.class),
            format!("{}", p.score),
        ])?;
    }
    wtr.flush().map_err(Error::Io)?;
    Ok(())
}

/// Converts a `[1,1,H,W]` (or `[H,W]`) tensor into a [`ScalarMap`].
pub fn tensor_to_map<S: Scalar>(t: &TensorData<S>) -> Result<ScalarMap> {
    let (h, w) = match t.shape() {
        [1, 1, h, w] | [h, w] => (*h, *w),
        other => {
            return Err(Error::shape_mismatch(
                "tensor_to_map",
                "[1,1,H,W] or [H,W]",
                format!("{other:?}"),
            ))
        }
    };
    Grid::from_vec(h, w, t.data().iter().map(|&v| v.to_f64() as f32).collect())
}

pub fn map_to_tensor<S: Scalar>(m: &ScalarMap) -> TensorData<S> {
    TensorData::new(
        vec![1, 1, m.h(), m.w()],
        m.data().iter().map(|&v| S::from_f64(v as f64)).collect(),
    )
    .expect("sizes agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn rgb_roundtrip_is_exact_for_u8_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32 * 7.0 % 256.0) / 255.0).collect();
        let t = TensorData::new(vec![1, 3, 4, 5], data).unwrap();
        save_rgb(&path, &t).unwrap();
        let back = load_rgb::<f32>(&path).unwrap();
        assert_eq!(back.shape(), &[1, 3, 4, 5]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn label_and_instance_roundtrip() {
        let dir = tempdir().unwrap();
        let lpath = dir.path().join("labels.png");
        let mut lm = LabelMap::filled(3, 4, 0);
        lm.set(0, 0, 1);
        lm.set(2, 3, 255);
        save_label_map(&lpath, &lm).unwrap();
        assert_eq!(load_label_map(&lpath).unwrap(), lm);

        let ipath = dir.path().join("inst.png");
        let mut im = InstanceMask::filled(3, 4, 0);
        im.set(1, 1, 300); // beyond u8 range, proves 16-bit depth
        save_instance_mask(&ipath, &im).unwrap();
        assert_eq!(load_instance_mask(&ipath).unwrap(), im);
    }

    #[test]
    fn points_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("points.csv");
        let pts = vec![
            Point { row: 3.5, col: 7.25, class: 1, score: 0.9 },
            Point { row: 10.0, col: 2.0, class: 2, score: 0.25 },
        ];
        save_points_csv(&path, &pts).unwrap();
        assert_eq!(load_points_csv(&path).unwrap(), pts);
    }
}
