//! Multi-digit strips for the digit-count task: each image is a row of
//! `columns` cells, every cell either blank or a random source digit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeSpec {
    pub columns: usize,
    /// Side length of a square source cell.
    pub cell: usize,
    pub p_empty: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CompositeSpec {
    fn default() -> Self {
        Self {
            columns: 5,
            cell: 28,
            p_empty: 1.0 / 11.0,
            n_train: 5000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl CompositeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.columns == 0 || self.cell == 0 {
            return Err(Error::Config("columns and cell must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_empty) {
            return Err(Error::Config(format!(
                "p_empty must lie in [0, 1], got {}",
                self.p_empty
            )));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
        }
    }

    /// `cell × (cell · columns)` pixels.
    pub fn dim(&self) -> usize {
        self.cell * self.cell * self.columns
    }
}

/// Builds the `split` part of the composite dataset from labeled single
/// digits. Pixels stay multiples of 1/255 so they survive an IDX round trip.
/// Targets are per-class counts `[N×K]` where `K` is the source label width.
pub fn gen_composite_digits(source: &Dataset, spec: &CompositeSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let labels = source.labels()?;
    let cell_px = spec.cell * spec.cell;
    if source.dim() != cell_px {
        return Err(Error::shape(
            "gen_composite_digits",
            source.x.shape(),
            &[source.len(), cell_px],
        ));
    }
    let n = spec.count(split);
    if n == 0 {
        return Err(Error::Config(format!("{split:?} split size must be >= 1")));
    }
    let k = labels.cols();
    let digit: Vec<usize> = (0..source.len())
        .map(|i| {
            let row = labels.row(i);
            (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 0,
        Split::Test => 1,
    });
    let width = spec.cell * spec.columns;
    let mut x = vec![0.0; n * spec.dim()];
    let mut y = vec![0.0; n * k];
    for i in 0..n {
        let img = &mut x[i * spec.dim()..(i + 1) * spec.dim()];
        for c in 0..spec.columns {
            if rng.gen::<f64>() < spec.p_empty {
                continue;
            }
            let src = rng.gen_range(0..source.len());
            y[i * k + digit[src]] += 1.0;
            let pixels = source.x.row(src);
            for r in 0..spec.cell {
                let dst = r * width + c * spec.cell;
                img[dst..dst + spec.cell].copy_from_slice(&pixels[r * spec.cell..(r + 1) * spec.cell]);
            }
        }
    }
    let mut ds = Dataset::new(
        Tensor::from_parts(vec![n, spec.dim()], x),
        Some(Tensor::from_parts(vec![n, k], y)),
        split,
    )?;
    ds.label_names = source.label_names.clone();
    Ok(ds)
}

/// Reorders the pixels of each strip so that every cell is one contiguous
/// row-major block, cell by cell from left to right.
pub fn cells_contiguous(x: &Tensor, spec: &CompositeSpec) -> Result<Tensor> {
    if x.ndim() != 2 || x.cols() != spec.dim() {
        return Err(Error::shape("cells_contiguous", x.shape(), &[x.rows(), spec.dim()]));
    }
    let width = spec.cell * spec.columns;
    let mut out = Vec::with_capacity(x.len());
    for img in x.data().chunks(spec.dim()) {
        for c in 0..spec.columns {
            for r in 0..spec.cell {
                let src = r * width + c * spec.cell;
                out.extend_from_slice(&img[src..src + spec.cell]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
