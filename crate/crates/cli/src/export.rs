//! Plain-text image grids and CSV dumps.

use std::fmt::Write;

use anyhow::{bail, Result};
use sdlgm_core::data::Dataset;
use sdlgm_core::model::LatentSample;
use sdlgm_core::numerics::Tensor;

fn to_gray(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// ASCII PGM (`P2`) of a grid of images. `images[r][c]` is one flattened image of
/// width `width`; every image must have the same length.
pub fn grid_pgm(images: &[Vec<&[f64]>], width: usize) -> Result<String> {
    let Some(first) = images.first().and_then(|r| r.first()) else {
        bail!("empty image grid");
    };
    let px = first.len();
    if width == 0 || px % width != 0 {
        bail!("image of {px} pixels is not a multiple of width {width}");
    }
    let height = px / width;
    let cols = images.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (cols * width, images.len() * height);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in images {
        if row.iter().any(|img| img.len() != px) {
            bail!("images in a grid must all have {px} pixels");
        }
        for y in 0..height {
            let mut line = Vec::with_capacity(w);
            for c in 0..cols {
                match row.get(c) {
                    Some(img) => line.extend(img[y * width..(y + 1) * width].iter().map(|v| to_gray(*v))),
                    None => line.extend(std::iter::repeat_n(0, width)),
                }
            }
            let text: Vec<String> = line.iter().map(u8::to_string).collect();
            out.push_str(&text.join(" "));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Two-column grid: originals on the left, reconstructions on the right.
pub fn side_by_side_pgm(left: &Tensor, right: &Tensor, width: usize) -> Result<String> {
    if left.shape() != right.shape() {
        bail!("shape mismatch: {:?} vs {:?}", left.shape(), right.shape());
    }
    let rows: Vec<Vec<&[f64]>> = (0..left.rows()).map(|i| vec![left.row(i), right.row(i)]).collect();
    grid_pgm(&rows, width)
}

/// `row,label,z_0..z_{K-1},lambda,L`; `label` is the argmax of the one-hot
/// labels, or empty when the dataset has none.
pub fn embedding_csv(data: &Dataset, sample: &LatentSample, lambda: &Tensor) -> Result<String> {
    let n = data.len();
    if sample.code.rows() != n || lambda.len() != n {
        bail!("embedding for {} rows but the dataset has {n}", sample.code.rows());
    }
    let k = sample.code.cols();
    let mut out = String::from("row,label");
    for j in 0..k {
        write!(out, ",z_{j}")?;
    }
    out.push_str(",lambda,L\n");
    let sparsity = sample.rounded_sparsity();
    for (i, l) in sparsity.iter().enumerate() {
        let label = match &data.y {
            Some(y) => {
                let row = y.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                data.label_names.get(best).cloned().unwrap_or_else(|| best.to_string())
            }
            None => String::new(),
        };
        write!(out, "{i},{label}")?;
        for v in sample.code.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{},{l}", lambda.data()[i])?;
    }
    Ok(out)
}
