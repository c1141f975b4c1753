//! Atom-centred point clouds around the adsorbate and surface.
//!
//! Centres are the adsorbate (tag 2) and surface (tag 1) atoms. Neighbours are
//! the centres plus a seeded random subset of subsurface (tag 0) atoms. Each
//! (centre, neighbour) pair is described by two concatenated one-hot blocks
//! over atomic numbers, and batches are zero padded with an explicit mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::structures::{tag, AtomicStructure};
use crate::tensor::{Tensor, TensorError};
use crate::Z_MAX;

/// Width of one pair feature vector: centre block followed by neighbour block.
pub const PAIR_WIDTH: usize = 2 * Z_MAX;
pub const DEFAULT_NUM_SUBSTRATE: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum PointCloudError {
    #[error("atomic number {0} outside [1, {Z_MAX}]")]
    AtomicNumber(u32),
    #[error("structure {0} has no adsorbate atoms")]
    NoAdsorbate(String),
    #[error("no point clouds to batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Centre/neighbour one-hot pair encoding (length [`PAIR_WIDTH`]).
pub fn pair_features(center_z: u32, neighbor_z: u32) -> Result<Vec<f64>, PointCloudError> {
    let mut v = vec![0.0; PAIR_WIDTH];
    write_pair(&mut v, center_z, neighbor_z)?;
    Ok(v)
}

fn write_pair(out: &mut [f64], center_z: u32, neighbor_z: u32) -> Result<(), PointCloudError> {
    for z in [center_z, neighbor_z] {
        if z < 1 || z as usize > Z_MAX {
            return Err(PointCloudError::AtomicNumber(z));
        }
    }
    out[center_z as usize - 1] = 1.0;
    out[Z_MAX + neighbor_z as usize - 1] = 1.0;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PointCloudSample {
    pub source_id: String,
    pub center_indices: Vec<usize>,
    pub neighbor_indices: Vec<usize>,
    pub positions_centers: Vec<[f64; 3]>,
    pub positions_neighbors: Vec<[f64; 3]>,
    /// `M x K x PAIR_WIDTH`.
    pub pair_features: Tensor,
    pub energy: Option<f64>,
}

impl PointCloudSample {
    pub fn num_centers(&self) -> usize {
        self.center_indices.len()
    }

    pub fn num_neighbors(&self) -> usize {
        self.neighbor_indices.len()
    }
}

/// Builds the point cloud of one structure; pure in `(structure, num_substrate, seed)`.
pub fn sample_point_cloud(
    structure: &AtomicStructure,
    num_substrate: usize,
    seed: u64,
) -> Result<PointCloudSample, PointCloudError> {
    let adsorbate = structure.indices_with_tag(tag::ADSORBATE);
    if adsorbate.is_empty() {
        return Err(PointCloudError::NoAdsorbate(structure.id.clone()));
    }
    let surface = structure.indices_with_tag(tag::SURFACE);
    let bulk = structure.indices_with_tag(tag::SUBSURFACE);

    let mut centers = adsorbate;
    centers.extend(surface);
    centers.sort_unstable();

    let take = num_substrate.min(bulk.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, bulk.len(), take)
        .into_iter()
        .map(|k| bulk[k])
        .collect();
    picked.sort_unstable();

    let mut neighbors = centers.clone();
    neighbors.extend(picked);

    let (m, k) = (centers.len(), neighbors.len());
    let mut feats = vec![0.0; m * k * PAIR_WIDTH];
    for (a, &c) in centers.iter().enumerate() {
        for (b, &nb) in neighbors.iter().enumerate() {
            let off = (a * k + b) * PAIR_WIDTH;
            write_pair(
                &mut feats[off..off + PAIR_WIDTH],
                structure.atomic_numbers[c],
                structure.atomic_numbers[nb],
            )?;
        }
    }
    Ok(PointCloudSample {
        source_id: structure.id.clone(),
        positions_centers: centers.iter().map(|&i| structure.positions[i]).collect(),
        positions_neighbors: neighbors.iter().map(|&i| structure.positions[i]).collect(),
        center_indices: centers,
        neighbor_indices: neighbors,
        pair_features: Tensor::new([m, k, PAIR_WIDTH], feats)?,
        energy: structure.energy,
    })
}

/// Zero-padded batch of point clouds.
#[derive(Debug, Clone)]
pub struct PointCloudBatch {
    /// `B x M_max x K_max x PAIR_WIDTH`.
    pub features: Tensor,
    /// `B x (M_max + K_max) x 3`: padded centres, then padded neighbours.
    pub positions: Tensor,
    /// `B x M_max x K_max`, true on real (centre, neighbour) pairs.
    pub mask: Vec<bool>,
    pub energies: Option<Vec<f64>>,
    pub source_ids: Vec<String>,
    pub sizes: Vec<(usize, usize)>,
    pub max_centers: usize,
    pub max_neighbors: usize,
}

pub fn batch_point_clouds(
    samples: &[PointCloudSample],
) -> Result<PointCloudBatch, PointCloudError> {
    if samples.is_empty() {
        return Err(PointCloudError::EmptyBatch);
    }
    let b = samples.len();
    let m_max = samples.iter().map(|s| s.num_centers()).max().unwrap_or(0);
    let k_max = samples.iter().map(|s| s.num_neighbors()).max().unwrap_or(0);
    let mut features = vec![0.0; b * m_max * k_max * PAIR_WIDTH];
    let mut positions = vec![0.0; b * (m_max + k_max) * 3];
    let mut mask = vec![false; b * m_max * k_max];
    for (s_idx, s) in samples.iter().enumerate() {
        let (m, k) = (s.num_centers(), s.num_neighbors());
        let src = s.pair_features.data();
        for c in 0..m {
            for n in 0..k {
                let dst = ((s_idx * m_max + c) * k_max + n) * PAIR_WIDTH;
                let from = (c * k + n) * PAIR_WIDTH;
                features[dst..dst + PAIR_WIDTH].copy_from_slice(&src[from..from + PAIR_WIDTH]);
                mask[(s_idx * m_max + c) * k_max + n] = true;
            }
        }
        let base = s_idx * (m_max + k_max);
        for (c, p) in s.positions_centers.iter().enumerate() {
            positions[(base + c) * 3..(base + c + 1) * 3].copy_from_slice(p);
        }
        for (n, p) in s.positions_neighbors.iter().enumerate() {
            let row = base + m_max + n;
            positions[row * 3..(row + 1) * 3].copy_from_slice(p);
        }
    }
    let energies = samples.iter().map(|s| s.energy).collect::<Option<Vec<_>>>();
    Ok(PointCloudBatch {
        features: Tensor::new([b, m_max, k_max, PAIR_WIDTH], features)?,
        positions: Tensor::new([b, m_max + k_max, 3], positions)?,
        mask,
        energies,
        source_ids: samples.iter().map(|s| s.source_id.clone()).collect(),
        sizes: samples
            .iter()
            .map(|s| (s.num_centers(), s.num_neighbors()))
            .collect(),
        max_centers: m_max,
        max_neighbors: k_max,
    })
}

impl PointCloudBatch {
    pub fn batch_size(&self) -> usize {
        self.sizes.len()
    }

    pub fn valid_pairs(&self, sample: usize) -> usize {
        let per = self.max_centers * self.max_neighbors;
        self.mask[sample * per..(sample + 1) * per]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    /// Mask broadcast over a trailing dimension of width `width`, inverted
    /// (true where the entry is padding).
    pub fn padding_mask(&self, width: usize) -> Vec<bool> {
        self.mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(!m, width))
            .collect()
    }

    /// Sum of any `B x M_max x K_max x W` tensor over valid pairs: `B x W`.
    pub fn masked_sum(&self, values: &Tensor) -> Result<Tensor, PointCloudError> {
        let b = self.batch_size();
        let pairs = self.max_centers * self.max_neighbors;
        let width = values.numel() / (b * pairs).max(1);
        let expected = [b, self.max_centers, self.max_neighbors, width];
        if values.shape() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "masked_sum",
                lhs: values.shape().to_vec(),
                rhs: expected.to_vec(),
            }
            .into());
        }
        Ok(values
            .masked_fill(&self.padding_mask(width), 0.0)?
            .reshape(&[b, pairs, width])?
            .sum_axis(1, false)?)
    }

    /// Mean over valid pairs: `B x W`.
    pub fn masked_mean(&self, values: &Tensor) -> Result<Tensor, PointCloudError> {
        let sums = self.masked_sum(values)?;
        let counts: Vec<f64> = (0..self.batch_size())
            .map(|s| self.valid_pairs(s).max(1) as f64)
            .collect();
        let counts = Tensor::new([self.batch_size(), 1], counts)?;
        Ok(sums.div(&counts)?)
    }
}
