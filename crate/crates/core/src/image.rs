//! Image helpers: fixed-point snapping, PNG output, bilinear resizing.
//!
//! Every image produced by the crate stores values on a `2^-20` grid. The
//! patch codec relies on this to make `decode(encode(x)) == x` hold bit-exactly.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRID_BITS: i32 = 20;

/// Round to the nearest multiple of `2^-GRID_BITS`.
pub fn snap(v: f64) -> f32 {
    let s = (1u64 << GRID_BITS) as f64;
    ((v * s).round() / s) as f32
}

/// Snap every element of `t` onto the image grid.
pub fn snap_tensor(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = snap(*v as f64);
    }
}

/// Write an `H×W×3` (or `H×W`) tensor with values in `[0,1]` as 8-bit PNG.
pub fn write_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = match t.shape() {
        [h, w, 3] => (*h, *w, 3),
        [h, w] => (*h, *w, 1),
        s => return Err(Error::invalid(format!("cannot write tensor of shape {s:?} as PNG"))),
    };
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Read an 8-bit PNG as `H×W×3` (color) or `H×W` (grayscale) in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let bad = |e: png::DecodingError| Error::format("png", path, e);
    let mut reader = dec.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.color_type.samples();
    let px = &buf[..info.buffer_size()];
    let level = |v: u8| snap(v as f64 / 255.0);
    let (shape, data): (Vec<usize>, Vec<f32>) = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
            (vec![h, w], px.chunks_exact(stride).map(|c| level(c[0])).collect())
        }
        _ => (
            vec![h, w, 3],
            px.chunks_exact(stride)
                .flat_map(|c| [level(c[0]), level(c[1]), level(c[2])])
                .collect(),
        ),
    };
    Tensor::new(shape, data)
}

/// Concatenate equally sized `H×W×3` images into a grid, row-major.
pub fn tile_grid(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::invalid("empty image grid"))?;
    let (h, w) = match first.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::invalid(format!("grid cells must be HxWx3, got {s:?}"))),
    };
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (h * rows.len(), w * ncols);
    let mut out = Tensor::zeros(&[gh, gw, 3]);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            img.ensure_shape(&[h, w, 3])?;
            for y in 0..h {
                let src = &img.data()[y * w * 3..(y + 1) * w * 3];
                let dst_off = ((ri * h + y) * gw + ci * w) * 3;
                out.data_mut()[dst_off..dst_off + w * 3].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Bilinear resize of an `H×W` map (half-pixel centers, edge clamped).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let v = |y: usize, x: usize| src[y * w + x] as f64;
            let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
            let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
            out[oy * ow + ox] = (top * (1.0 - ty) + bot * ty) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snap_is_idempotent() {
        for v in [0.0, 1.0, 0.123456789, 1e-9, 0.999999] {
            let s = snap(v);
            assert_eq!(snap(s as f64), s);
            assert!((s as f64 - v).abs() <= 0.5 / (1u64 << GRID_BITS) as f64 + 1e-12);
        }
    }

    #[test]
    fn downsample_by_four_averages_center_pixels() {
        let src: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let out = resize_bilinear(&src, 4, 4, 1, 1);
        assert_eq!(out, vec![7.5]);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![4, 5, 3], (0..60).map(|i| snap(i as f64 * 4.0 / 255.0)).collect()).unwrap();
        write_png(&t, dir.path().join("a.png")).unwrap();
        assert_eq!(read_png(dir.path().join("a.png")).unwrap(), t);
        let g = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        write_png(&g, dir.path().join("b.png")).unwrap();
        assert_eq!(read_png(dir.path().join("b.png")).unwrap(), g);
        assert!(write_png(&Tensor::zeros(&[4]), dir.path().join("c.png")).is_err());
        assert!(read_png(dir.path().join("missing.png")).is_err());
    }
}
