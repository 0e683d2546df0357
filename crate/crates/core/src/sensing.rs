//! Block-wise sensing: the row-orthonormal Gaussian operator, block
//! unfolding/folding with overlap normalisation, sampling `y = Φx` and the
//! back-projection `x⁰ = Φᵀy`.
//!
//! Blocks are taken on a regular stride grid over a reflect-padded canvas and
//! flattened row-major. `fold` averages overlapping contributions using the
//! layout's count map and crops back to the source size, so
//! `fold(unfold(x)) == x` for every admissible stride.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default block side length in pixels.
pub const BLOCK_SIZE: usize = 33;
/// Default block pixel count (`33 * 33`).
pub const BLOCK_PIXELS: usize = BLOCK_SIZE * BLOCK_SIZE;
/// Default stride used for overlapping deblocking.
pub const DEBLOCK_STRIDE: usize = 16;

/// Number of measurements per block for a sampling ratio: `floor(ratio * n)`.
pub fn measurement_count(ratio: f64, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::domain(format!("sampling ratio {ratio} outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::domain("block pixel count must be positive"));
    }
    // Guard against 0.3 * 1089 = 326.69999... style representation noise
    // around exact integers.
    let m = (ratio * n as f64 + 1e-9).floor() as usize;
    if m == 0 {
        return Err(Error::domain(format!(
            "ratio {ratio} yields zero measurements for n = {n}"
        )));
    }
    Ok(m.min(n))
}

/// A row-orthonormal sampling operator `Φ ∈ R^{m×n}`.
#[derive(Clone, Debug)]
pub struct MeasurementMatrix {
    ratio: f64,
    n: usize,
    m: usize,
    seed: u64,
    matrix: Array2<f64>,
}

/// JSON sidecar stored next to a persisted matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixMeta {
    pub ratio: f64,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

/// Draws an i.i.d. standard Gaussian `m × n` matrix and orthonormalises its
/// rows, so that `ΦΦᵀ = I_m`.
pub fn generate_phi(ratio: f64, n: usize, seed: u64) -> Result<MeasurementMatrix> {
    let m = measurement_count(ratio, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = Array2::<f64>::zeros((m, n));
    for v in matrix.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    orthonormalize_rows(&mut matrix)?;
    Ok(MeasurementMatrix {
        ratio,
        n,
        m,
        seed,
        matrix,
    })
}

/// CholeskyQR2: `A ← L⁻¹A` with `AAᵀ = LLᵀ`, applied twice. Equal to
/// Gram-Schmidt with positive diagonal; the second pass brings the loss of
/// orthogonality down to machine precision.
fn orthonormalize_rows(a: &mut Array2<f64>) -> Result<()> {
    let m = a.nrows();
    for _ in 0..2 {
        let gram = a.dot(&a.t());
        let gram = DMatrix::from_fn(m, m, |i, j| gram[[i, j]]);
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::domain("rank-deficient Gaussian draw"))?;
        let inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .ok_or_else(|| Error::domain("rank-deficient Gaussian draw"))?;
        let inv = Array2::from_shape_fn((m, m), |(i, j)| inv[(i, j)]);
        *a = inv.dot(a);
    }
    Ok(())
}

impl MeasurementMatrix {
    /// Wraps an explicit matrix. Rows are expected to be orthonormal; this is
    /// checked to `1e-6`.
    pub fn from_matrix(ratio: f64, seed: u64, matrix: Array2<f64>) -> Result<Self> {
        let (m, n) = matrix.dim();
        if m == 0 || m > n {
            return Err(Error::domain(format!("matrix shape {m}x{n} is not wide")));
        }
        let phi = MeasurementMatrix {
            ratio,
            n,
            m,
            seed,
            matrix,
        };
        let dev = phi.orthogonality_error();
        if !(dev < 1e-6) {
            return Err(Error::domain(format!(
                "rows are not orthonormal (max deviation {dev:e})"
            )));
        }
        Ok(phi)
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    /// `max |ΦΦᵀ - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = self.matrix.dot(&self.matrix.t());
        let mut worst = 0.0f64;
        for ((i, j), &g) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
        worst
    }

    /// Applies `Φ` to every row of a `num_blocks × n` block stack.
    pub fn forward_blocks(&self, blocks: &Array2<f64>) -> Result<Array2<f64>> {
        if blocks.ncols() != self.n {
            return Err(Error::domain(format!(
                "blocks have {} pixels, operator expects {}",
                blocks.ncols(),
                self.n
            )));
        }
        Ok(blocks.dot(&self.matrix.t()))
    }

    /// Applies `Φᵀ` to every row of a `num_blocks × m` measurement stack.
    pub fn adjoint_blocks(&self, meas: &Array2<f64>) -> Result<Array2<f64>> {
        if meas.ncols() != self.m {
            return Err(Error::domain(format!(
                "measurements have {} entries, operator expects {}",
                meas.ncols(),
                self.m
            )));
        }
        Ok(meas.dot(&self.matrix))
    }

    pub fn meta(&self) -> MatrixMeta {
        MatrixMeta {
            ratio: self.ratio,
            n: self.n,
            m: self.m,
            seed: self.seed,
        }
    }

    /// Writes the matrix as raw little-endian `f32` row-major data to `path`
    /// and the metadata to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.m * self.n * 4);
        for &v in self.matrix.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta()).expect("meta serialises");
        fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    /// Reads a matrix written by [`MeasurementMatrix::save`]. The stored
    /// `f32` values are re-orthonormalised in `f64`.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: MatrixMeta =
            serde_json::from_str(&json).map_err(|e| Error::format(&side, e.to_string()))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != meta.m * meta.n * 4 {
            return Err(Error::format(
                path,
                format!(
                    "expected {} bytes for a {}x{} matrix, found {}",
                    meta.m * meta.n * 4,
                    meta.m,
                    meta.n,
                    bytes.len()
                ),
            ));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut matrix = Array2::from_shape_vec((meta.m, meta.n), data)
            .map_err(|e| Error::format(path, e.to_string()))?;
        orthonormalize_rows(&mut matrix)?;
        Ok(MeasurementMatrix {
            ratio: meta.ratio,
            n: meta.n,
            m: meta.m,
            seed: meta.seed,
            matrix,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Geometry of the block grid over one image.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    block_size: usize,
    stride: usize,
    image_h: usize,
    image_w: usize,
    padded_h: usize,
    padded_w: usize,
    count_map: Array2<f64>,
}

fn padded_extent(dim: usize, block: usize, stride: usize) -> usize {
    let base = dim.max(block);
    block + (base - block).div_ceil(stride) * stride
}

impl BlockLayout {
    pub fn new(image_h: usize, image_w: usize, block_size: usize, stride: usize) -> Result<Self> {
        if image_h == 0 || image_w == 0 {
            return Err(Error::domain("image must be non-empty"));
        }
        if block_size == 0 || stride == 0 {
            return Err(Error::domain("block size and stride must be positive"));
        }
        if stride > block_size {
            return Err(Error::domain(format!(
                "stride {stride} exceeds block size {block_size}; blocks would leave gaps"
            )));
        }
        let padded_h = padded_extent(image_h, block_size, stride);
        let padded_w = padded_extent(image_w, block_size, stride);
        let mut count_map = Array2::<f64>::zeros((padded_h, padded_w));
        let (gh, gw) = (
            (padded_h - block_size) / stride + 1,
            (padded_w - block_size) / stride + 1,
        );
        for by in 0..gh {
            for bx in 0..gw {
                let (oy, ox) = (by * stride, bx * stride);
                count_map
                    .slice_mut(s![oy..oy + block_size, ox..ox + block_size])
                    .mapv_inplace(|c| c + 1.0);
            }
        }
        Ok(BlockLayout {
            block_size,
            stride,
            image_h,
            image_w,
            padded_h,
            padded_w,
            count_map,
        })
    }

    /// Non-overlapping layout (`stride == block_size`).
    pub fn tiled(image_h: usize, image_w: usize, block_size: usize) -> Result<Self> {
        Self::new(image_h, image_w, block_size, block_size)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn block_pixels(&self) -> usize {
        self.block_size * self.block_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (self.padded_h, self.padded_w)
    }

    pub fn count_map(&self) -> &Array2<f64> {
        &self.count_map
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            (self.padded_h - self.block_size) / self.stride + 1,
            (self.padded_w - self.block_size) / self.stride + 1,
        )
    }

    pub fn num_blocks(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Top-left corners of the blocks, in row-major grid order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (gh, gw) = self.grid();
        (0..gh).flat_map(move |by| (0..gw).map(move |bx| (by * self.stride, bx * self.stride)))
    }

    fn check_image(&self, dims: (usize, usize)) -> Result<()> {
        if dims != (self.image_h, self.image_w) {
            return Err(Error::domain(format!(
                "image is {}x{}, layout expects {}x{}",
                dims.0, dims.1, self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    fn check_blocks(&self, dims: (usize, usize)) -> Result<()> {
        if dims != (self.num_blocks(), self.block_pixels()) {
            return Err(Error::domain(format!(
                "block stack is {}x{}, layout expects {}x{}",
                dims.0,
                dims.1,
                self.num_blocks(),
                self.block_pixels()
            )));
        }
        Ok(())
    }
}

/// Source index for padded position `i` under whole-sample reflection
/// (`d c b | a b c d | c b a`), extended periodically for large pads.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let j = i % period;
    if j < len {
        j
    } else {
        period - j
    }
}

/// Reflect-pads `image` to the layout's canvas and extracts every block as
/// one row of a `num_blocks × block_size²` matrix.
pub fn unfold(image: ArrayView2<'_, f64>, layout: &BlockLayout) -> Result<Array2<f64>> {
    layout.check_image(image.dim())?;
    let bs = layout.block_size;
    let (h, w) = layout.image_dims();
    let row_src: Vec<usize> = (0..layout.padded_h).map(|i| reflect(i, h)).collect();
    let col_src: Vec<usize> = (0..layout.padded_w).map(|j| reflect(j, w)).collect();
    let mut blocks = Array2::<f64>::zeros((layout.num_blocks(), bs * bs));
    for (b, (oy, ox)) in layout.origins().enumerate() {
        let mut row = blocks.row_mut(b);
        for i in 0..bs {
            let sy = row_src[oy + i];
            for j in 0..bs {
                row[i * bs + j] = image[[sy, col_src[ox + j]]];
            }
        }
    }
    Ok(blocks)
}

/// Adjoint of [`unfold`]: scatter-adds every block entry back onto the source
/// pixel it was read from.
pub fn unfold_adjoint(blocks: &Array2<f64>, layout: &BlockLayout) -> Result<Array2<f64>> {
    layout.check_blocks(blocks.dim())?;
    let bs = layout.block_size;
    let (h, w) = layout.image_dims();
    let row_src: Vec<usize> = (0..layout.padded_h).map(|i| reflect(i, h)).collect();
    let col_src: Vec<usize> = (0..layout.padded_w).map(|j| reflect(j, w)).collect();
    let mut out = Array2::<f64>::zeros((h, w));
    for (b, (oy, ox)) in layout.origins().enumerate() {
        let row = blocks.row(b);
        for i in 0..bs {
            let sy = row_src[oy + i];
            for j in 0..bs {
                out[[sy, col_src[ox + j]]] += row[i * bs + j];
            }
        }
    }
    Ok(out)
}

/// Sums blocks onto the padded canvas, divides by the overlap count and crops
/// to the source dimensions.
pub fn fold(blocks: &Array2<f64>, layout: &BlockLayout) -> Result<Array2<f64>> {
    layout.check_blocks(blocks.dim())?;
    let bs = layout.block_size;
    let mut canvas = Array2::<f64>::zeros((layout.padded_h, layout.padded_w));
    for (b, (oy, ox)) in layout.origins().enumerate() {
        let row = blocks.row(b);
        for i in 0..bs {
            for j in 0..bs {
                canvas[[oy + i, ox + j]] += row[i * bs + j];
            }
        }
    }
    canvas /= &layout.count_map;
    Ok(canvas
        .slice(s![..layout.image_h, ..layout.image_w])
        .to_owned())
}

/// Adjoint of [`fold`]: zero-extends to the canvas, divides by the overlap
/// count and gathers each block.
pub fn fold_adjoint(image: ArrayView2<'_, f64>, layout: &BlockLayout) -> Result<Array2<f64>> {
    layout.check_image(image.dim())?;
    let bs = layout.block_size;
    let mut canvas = Array2::<f64>::zeros((layout.padded_h, layout.padded_w));
    canvas
        .slice_mut(s![..layout.image_h, ..layout.image_w])
        .assign(&image);
    canvas /= &layout.count_map;
    let mut blocks = Array2::<f64>::zeros((layout.num_blocks(), bs * bs));
    for (b, (oy, ox)) in layout.origins().enumerate() {
        let mut row = blocks.row_mut(b);
        for i in 0..bs {
            for j in 0..bs {
                row[i * bs + j] = canvas[[oy + i, ox + j]];
            }
        }
    }
    Ok(blocks)
}

/// Per-block measurements of one image.
#[derive(Clone, Debug)]
pub struct Measurements {
    pub per_block: Array2<f64>,
    pub layout: BlockLayout,
    pub ratio: f64,
}

impl Measurements {
    pub fn num_blocks(&self) -> usize {
        self.per_block.nrows()
    }
}

fn check_operator(phi: &MeasurementMatrix, layout: &BlockLayout) -> Result<()> {
    if phi.n() != layout.block_pixels() {
        return Err(Error::domain(format!(
            "operator acts on {} pixels but blocks hold {}",
            phi.n(),
            layout.block_pixels()
        )));
    }
    Ok(())
}

/// `y_i = Φ · block_i` for every block of the layout.
pub fn sample(
    image: ArrayView2<'_, f64>,
    phi: &MeasurementMatrix,
    layout: &BlockLayout,
) -> Result<Measurements> {
    check_operator(phi, layout)?;
    let blocks = unfold(image, layout)?;
    Ok(Measurements {
        per_block: phi.forward_blocks(&blocks)?,
        layout: layout.clone(),
        ratio: phi.ratio(),
    })
}

/// The network's starting estimate `x⁰ = fold(Φᵀ y)`.
pub fn initialize(meas: &Measurements, phi: &MeasurementMatrix) -> Result<Array2<f64>> {
    check_operator(phi, &meas.layout)?;
    if meas.per_block.dim() != (meas.layout.num_blocks(), phi.m()) {
        return Err(Error::domain(format!(
            "measurement stack is {:?}, expected ({}, {})",
            meas.per_block.dim(),
            meas.layout.num_blocks(),
            phi.m()
        )));
    }
    fold(&phi.adjoint_blocks(&meas.per_block)?, &meas.layout)
}

/// The block-wise data-fidelity direction `fold(Φᵀ(y - Φ·unfold(x)))`.
pub fn fidelity_step(
    x: ArrayView2<'_, f64>,
    meas: &Measurements,
    phi: &MeasurementMatrix,
) -> Result<Array2<f64>> {
    let blocks = unfold(x, &meas.layout)?;
    let residual = &meas.per_block - &phi.forward_blocks(&blocks)?;
    fold(&phi.adjoint_blocks(&residual)?, &meas.layout)
}

/// Vector-Jacobian product of [`fidelity_step`] with respect to `x`.
pub fn fidelity_step_vjp(
    grad: ArrayView2<'_, f64>,
    meas: &Measurements,
    phi: &MeasurementMatrix,
) -> Result<Array2<f64>> {
    let d_blocks = fold_adjoint(grad, &meas.layout)?;
    let d_resid = phi.forward_blocks(&d_blocks)?;
    let d_x_blocks = phi.adjoint_blocks(&d_resid)?;
    let mut out = unfold_adjoint(&d_x_blocks, &meas.layout)?;
    out.mapv_inplace(|v| -v);
    Ok(out)
}

/// BT.601 full-range luma from RGB components in `[0, 1]`.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}
