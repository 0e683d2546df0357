//! Ground-truth blocks for training: luminance images, random crops and the
//! eight dihedral augmentations, in a seed-determined order.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{is_image_file, load_luma};

/// Rotation by `t % 4` quarter turns, followed by a transpose-style flip
/// when `t >= 4`. Covers the dihedral group of the square.
pub fn dihedral(block: &Array2<f64>, t: usize) -> Array2<f64> {
    let mut out = block.clone();
    for _ in 0..(t % 4) {
        // quarter turn counter-clockwise: transpose then flip rows
        out = out.t().slice(s![..;-1, ..]).to_owned();
    }
    if t >= 4 {
        out = out.slice(s![.., ..;-1]).to_owned();
    }
    out
}

/// Infinite stream of training blocks. Each epoch visits every image once in
/// shuffled order.
#[derive(Clone, Debug)]
pub struct BlockSampler {
    images: Vec<Array2<f64>>,
    block: usize,
    augment: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

/// Loads every decodable image under `dir` (non-recursive).
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for path in paths {
        match load_luma(&path) {
            Ok(img) => {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                images.push((name, img));
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(images)
}

/// Opens a directory of images as a block stream.
pub fn make_dataset(dir: &Path, block: usize, augment: bool, seed: u64) -> Result<BlockSampler> {
    let images = load_image_dir(dir)?
        .into_iter()
        .map(|(_, img)| img)
        .collect::<Vec<_>>();
    if images.is_empty() {
        return Err(Error::Config(format!(
            "no decodable images in {}",
            dir.display()
        )));
    }
    BlockSampler::from_images(images, block, augment, seed)
}

impl BlockSampler {
    pub fn from_images(
        images: Vec<Array2<f64>>,
        block: usize,
        augment: bool,
        seed: u64,
    ) -> Result<Self> {
        let total = images.len();
        let images: Vec<_> = images
            .into_iter()
            .filter(|img| {
                let ok = img.nrows() >= block && img.ncols() >= block;
                if !ok {
                    log::warn!("skipping {:?} image smaller than {block}x{block}", img.dim());
                }
                ok
            })
            .collect();
        if images.is_empty() {
            return Err(Error::Config(format!(
                "none of {total} images is at least {block}x{block}"
            )));
        }
        Ok(BlockSampler {
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            images,
            block,
            augment,
        })
    }

    /// Number of source images, i.e. blocks per epoch.
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// Next block together with the dihedral transform applied to it.
    pub fn next_with_transform(&mut self) -> (Array2<f64>, usize) {
        if self.cursor == self.order.len() {
            self.order = (0..self.images.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let img = &self.images[self.order[self.cursor]];
        self.cursor += 1;
        let (h, w) = img.dim();
        let oy = self.rng.gen_range(0..=h - self.block);
        let ox = self.rng.gen_range(0..=w - self.block);
        let crop = img
            .slice(s![oy..oy + self.block, ox..ox + self.block])
            .to_owned();
        if self.augment {
            let t = self.rng.gen_range(0..8);
            (dihedral(&crop, t), t)
        } else {
            (crop, 0)
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<Array2<f64>> {
        (0..size).map(|_| self.next_with_transform().0).collect()
    }
}

impl Iterator for BlockSampler {
    type Item = Array2<f64>;

    fn next(&mut self) -> Option<Array2<f64>> {
        Some(self.next_with_transform().0)
    }
}
