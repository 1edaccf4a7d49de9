//! PNG previews for the console.

use crate::analysis::Image;

pub const PREVIEW_MAX: usize = 512;

/// 8-bit grayscale preview: 16-bit images are windowed to their min/max,
/// then anything larger than [`PREVIEW_MAX`] is area-averaged down.
pub fn render(img: &Image) -> Vec<u8> {
    let (rows, cols) = (img.rows(), img.cols());
    let px = img.pixels();
    let gray: Vec<u8> = if img.bits() == 8 {
        px.iter().map(|&p| p as u8).collect()
    } else {
        let lo = px.iter().copied().min().unwrap_or(0) as u32;
        let hi = px.iter().copied().max().unwrap_or(0) as u32;
        let span = (hi - lo).max(1);
        px.iter().map(|&p| (((p as u32 - lo) * 255 + span / 2) / span) as u8).collect()
    };
    let (gray, out_r, out_c) = downscale(&gray, rows, cols);
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, out_c as u32, out_r as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&gray).expect("in-memory PNG body");
    }
    buf
}

fn downscale(gray: &[u8], rows: usize, cols: usize) -> (Vec<u8>, usize, usize) {
    let big = rows.max(cols);
    if big <= PREVIEW_MAX {
        return (gray.to_vec(), rows, cols);
    }
    let out_r = ((rows * PREVIEW_MAX + big / 2) / big).max(1);
    let out_c = ((cols * PREVIEW_MAX + big / 2) / big).max(1);
    let mut sum = vec![0u64; out_r * out_c];
    let mut cnt = vec![0u64; out_r * out_c];
    for r in 0..rows {
        let orow = r * out_r / rows;
        for c in 0..cols {
            let i = orow * out_c + c * out_c / cols;
            sum[i] += gray[r * cols + c] as u64;
            cnt[i] += 1;
        }
    }
    let out = sum.iter().zip(&cnt).map(|(&s, &n)| ((s + n / 2) / n.max(1)) as u8).collect();
    (out, out_r, out_c)
}
