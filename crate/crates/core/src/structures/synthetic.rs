use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{distance, tag, AtomicStructure};

const BOX_LENGTH: f64 = 10.0;
const PLACEMENT_SEPARATION: f64 = 2.6;
const MAX_SYNTHETIC_Z: u32 = 20;

/// Smoothly truncated Lennard-Jones pair potential used to label synthetic data.
///
/// `phi(r) = eps_ij * ((r_min/r)^12 - 2 (r_min/r)^6) * S(r)` where `S` is a
/// quintic switch from 1 at `switch_on` to 0 at `cutoff` (continuous through
/// the second derivative). Well depth scales with the element pair via
/// `eps_ij = epsilon * sqrt(w(Z_i) w(Z_j))`, `w(Z) = 0.5 + Z/20`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPotential {
    pub epsilon: f64,
    pub r_min: f64,
    pub switch_on: f64,
    pub cutoff: f64,
}

impl Default for PairPotential {
    fn default() -> Self {
        PairPotential {
            epsilon: 0.1,
            r_min: 3.0,
            switch_on: 5.0,
            cutoff: 6.0,
        }
    }
}

impl PairPotential {
    fn well_depth(&self, zi: u32, zj: u32) -> f64 {
        let w = |z: u32| 0.5 + z as f64 / 20.0;
        self.epsilon * (w(zi) * w(zj)).sqrt()
    }

    fn switch(&self, r: f64) -> (f64, f64) {
        if r <= self.switch_on {
            return (1.0, 0.0);
        }
        if r >= self.cutoff {
            return (0.0, 0.0);
        }
        let width = self.cutoff - self.switch_on;
        let t = (r - self.switch_on) / width;
        let s = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let ds = -30.0 * t * t * (1.0 - t) * (1.0 - t) / width;
        (s, ds)
    }

    /// Pair energy and its radial derivative.
    pub fn pair(&self, zi: u32, zj: u32, r: f64) -> (f64, f64) {
        if r >= self.cutoff {
            return (0.0, 0.0);
        }
        let eps = self.well_depth(zi, zj);
        let q6 = (self.r_min / r).powi(6);
        let q12 = q6 * q6;
        let lj = q12 - 2.0 * q6;
        let dlj = -12.0 * (q12 - q6) / r;
        let (s, ds) = self.switch(r);
        (eps * lj * s, eps * (dlj * s + lj * ds))
    }

    pub fn energy(&self, numbers: &[u32], positions: &[[f64; 3]]) -> f64 {
        self.energy_and_forces(numbers, positions).0
    }

    /// Total energy (eV) and the analytic forces `-dE/dx` (eV/Å).
    pub fn energy_and_forces(
        &self,
        numbers: &[u32],
        positions: &[[f64; 3]],
    ) -> (f64, Vec<[f64; 3]>) {
        let n = positions.len();
        let mut energy = 0.0;
        let mut forces = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in 0..i {
                let r = distance(&positions[i], &positions[j]);
                let (e, de) = self.pair(numbers[i], numbers[j], r);
                energy += e;
                if de != 0.0 {
                    for k in 0..3 {
                        // dE/dx_i = de * (x_i - x_j) / r
                        let f = -de * (positions[i][k] - positions[j][k]) / r;
                        forces[i][k] += f;
                        forces[j][k] -= f;
                    }
                }
            }
        }
        (energy, forces)
    }
}

/// Tags by height: top 20% adsorbate, next 30% surface, rest subsurface.
/// At least one atom is always tagged as adsorbate.
pub(crate) fn tags_by_height(positions: &[[f64; 3]]) -> Vec<u8> {
    let n = positions.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| positions[b][2].total_cmp(&positions[a][2]).then(a.cmp(&b)));
    let n_ads = ((n as f64 * 0.2).round() as usize).max(1).min(n);
    let n_surf = ((n as f64 * 0.3).round() as usize).min(n - n_ads);
    let mut tags = vec![tag::SUBSURFACE; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_ads {
            tags[i] = tag::ADSORBATE;
        } else if rank < n_ads + n_surf {
            tags[i] = tag::SURFACE;
        }
    }
    tags
}

fn place_atoms(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mut separation = PLACEMENT_SEPARATION;
    loop {
        let mut placed: Vec<[f64; 3]> = Vec::with_capacity(n);
        let mut attempts = 0;
        while placed.len() < n && attempts < 20_000 {
            attempts += 1;
            let p = [
                rng.gen_range(0.0..BOX_LENGTH),
                rng.gen_range(0.0..BOX_LENGTH),
                rng.gen_range(0.0..BOX_LENGTH),
            ];
            if placed.iter().all(|q| distance(&p, q) >= separation) {
                placed.push(p);
            }
        }
        if placed.len() == n {
            return placed;
        }
        separation *= 0.9;
    }
}

/// Generates `n` labelled structures with `atoms_min..=atoms_max` atoms each.
///
/// Atomic numbers are drawn from 1..=20 and positions from a 10 Å box with a
/// minimum placement distance; energies and forces come from the default
/// [`PairPotential`]. Panics if `atoms_min < 2` or `atoms_min > atoms_max`.
pub fn generate_synthetic(
    n: usize,
    atoms_min: usize,
    atoms_max: usize,
    seed: u64,
) -> Vec<AtomicStructure> {
    assert!(
        2 <= atoms_min && atoms_min <= atoms_max,
        "need 2 <= atoms_min <= atoms_max, got {atoms_min}..={atoms_max}"
    );
    let potential = PairPotential::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let count = rng.gen_range(atoms_min..=atoms_max);
            let numbers: Vec<u32> = (0..count)
                .map(|_| rng.gen_range(1..=MAX_SYNTHETIC_Z))
                .collect();
            let positions = place_atoms(&mut rng, count);
            let (energy, forces) = potential.energy_and_forces(&numbers, &positions);
            AtomicStructure {
                id: format!("synth-{seed}-{k:05}"),
                tags: tags_by_height(&positions),
                atomic_numbers: numbers,
                positions,
                energy: Some(energy),
                forces: Some(forces),
                cell: None,
            }
        })
        .collect()
}
