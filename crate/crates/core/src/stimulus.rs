//! Stimulus design: white-noise code pools, max-min-distance code selection
//! and speller layout optimisation by simulated annealing, and JFPM
//! sinusoidal codes.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::containers::{CodeKind, Codebook, GridLayout, StimulusSequence};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const DISPLAY_RATE_HZ: f64 = 60.0;

/// Geometric-cooling schedule for the Metropolis search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealSchedule {
    pub t_initial: f64,
    pub t_final: f64,
    pub cooling: f64,
    pub iters_per_temp: usize,
    pub seed: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { t_initial: 1.0, t_final: 1e-3, cooling: 0.95, iters_per_temp: 200, seed: 0 }
    }
}

impl AnnealSchedule {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_initial > 0.0 && self.t_final > 0.0 && self.t_final < self.t_initial) {
            return Err(Error::arg("need 0 < t_final < t_initial"));
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return Err(Error::arg("cooling must lie in (0, 1)"));
        }
        if self.iters_per_temp == 0 {
            return Err(Error::arg("iters_per_temp must be positive"));
        }
        Ok(())
    }

    fn temperatures(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::successors(Some(self.t_initial), move |t| Some(t * self.cooling))
            .take_while(move |&t| t >= self.t_final)
    }
}

/// Parameters of the joint frequency-phase modulated SSVEP code set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JfpmSpec {
    pub f_start_hz: f64,
    pub f_step_hz: f64,
    pub n_targets: usize,
    pub phase_step_rad: f64,
    pub frame_rate_hz: f64,
}

impl Default for JfpmSpec {
    fn default() -> Self {
        Self {
            f_start_hz: 8.0,
            f_step_hz: 0.2,
            n_targets: 40,
            phase_step_rad: 0.5 * PI,
            frame_rate_hz: DISPLAY_RATE_HZ,
        }
    }
}

impl JfpmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_targets == 0 {
            return Err(Error::arg("JFPM needs at least one target"));
        }
        let f_max = self.frequency(self.n_targets - 1);
        if !(self.f_start_hz > 0.0 && f_max < self.frame_rate_hz / 2.0) {
            return Err(Error::arg(format!(
                "JFPM frequencies up to {f_max} Hz exceed the display Nyquist {} Hz",
                self.frame_rate_hz / 2.0
            )));
        }
        Ok(())
    }

    pub fn frequency(&self, i: usize) -> f64 {
        self.f_start_hz + self.f_step_hz * i as f64
    }

    pub fn phase(&self, i: usize) -> f64 {
        (self.phase_step_rad * i as f64).rem_euclid(2.0 * PI)
    }
}

/// `n_codes` white-noise codes with i.i.d. uniform frame values.
pub fn generate_wn_pool(n_codes: usize, n_frames: usize, seed: u64) -> Result<Codebook> {
    if n_codes == 0 || n_frames == 0 {
        return Err(Error::arg("pool needs at least one code and one frame"));
    }
    let total = n_codes
        .checked_mul(n_frames)
        .filter(|&n| n <= isize::MAX as usize / std::mem::size_of::<f64>())
        .ok_or_else(|| Error::Capacity(format!("{n_codes} x {n_frames} frames")))?;
    log::debug!("generating {total} white-noise frames");
    let mut rng = rng_for(seed, &[0x57_4E]);
    let sequences = (0..n_codes)
        .map(|c| {
            let frames = (0..n_frames).map(|_| rng.random::<f64>()).collect();
            StimulusSequence::new(c, frames, DISPLAY_RATE_HZ)
        })
        .collect::<Result<Vec<_>>>()?;
    Codebook::new(sequences, CodeKind::Wn, None)
}

/// 8-bit display luminance, `round(255 * frame)` with halves away from zero.
pub fn to_display_levels(seq: &StimulusSequence) -> Vec<u8> {
    seq.frames().iter().map(|&f| (255.0 * f).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Smallest pairwise Euclidean distance between code frame vectors
/// (`+inf` for fewer than two codes).
pub fn min_pairwise_distance(seqs: &[&StimulusSequence]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            best = best.min(euclidean(seqs[i].frames(), seqs[j].frames()));
        }
    }
    best
}

/// Outcome of a subset search, with pool indices sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSelection {
    pub indices: Vec<usize>,
    pub initial_objective: f64,
    pub objective: f64,
}

/// Anneal over `k`-subsets of `pool`, maximising the minimum pairwise
/// distance. Moves swap one selected code for one unselected code.
pub fn anneal_subset(pool: &Codebook, k: usize, schedule: &AnnealSchedule) -> Result<SubsetSelection> {
    let n = pool.len();
    if k == 0 || k > n {
        return Err(Error::arg(format!("cannot select {k} codes from a pool of {n}")));
    }
    schedule.validate()?;
    let frames = |i: usize| pool.sequences()[i].frames();
    if k == n {
        let refs: Vec<_> = pool.sequences().iter().collect();
        let obj = min_pairwise_distance(&refs);
        return Ok(SubsetSelection { indices: (0..n).collect(), initial_objective: obj, objective: obj });
    }

    let mut rng = rng_for(schedule.seed, &[0x53_41]);
    let mut selected: Vec<usize> = sample(&mut rng, n, k).into_vec();
    let mut in_subset = vec![false; n];
    for &i in &selected {
        in_subset[i] = true;
    }
    let mut outside: Vec<usize> = (0..n).filter(|&i| !in_subset[i]).collect();

    let mut dist = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let d = euclidean(frames(selected[a]), frames(selected[b]));
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }
    let min_excluding = |dist: &[Vec<f64>], skip: usize| {
        let mut m = f64::INFINITY;
        for a in 0..k {
            if a == skip {
                continue;
            }
            for b in a + 1..k {
                if b != skip {
                    m = m.min(dist[a][b]);
                }
            }
        }
        m
    };
    let mut current = min_excluding(&dist, usize::MAX);
    let initial_objective = current;
    let mut best = current;
    let mut best_sel = selected.clone();
    let mut row = vec![0.0; k];

    for temp in schedule.temperatures() {
        for _ in 0..schedule.iters_per_temp {
            let slot = rng.random_range(0..k);
            let out_pos = rng.random_range(0..outside.len());
            let incoming = outside[out_pos];
            let mut cand = min_excluding(&dist, slot);
            for (m, r) in row.iter_mut().enumerate() {
                if m == slot {
                    *r = 0.0;
                    continue;
                }
                *r = euclidean(frames(incoming), frames(selected[m]));
                cand = cand.min(*r);
            }
            let delta = cand - current;
            if delta >= 0.0 || rng.random::<f64>() < (delta / temp).exp() {
                outside[out_pos] = selected[slot];
                selected[slot] = incoming;
                for m in 0..k {
                    dist[slot][m] = row[m];
                    dist[m][slot] = row[m];
                }
                current = cand;
                if current > best {
                    best = current;
                    best_sel.clone_from(&selected);
                }
            }
        }
    }
    best_sel.sort_unstable();
    Ok(SubsetSelection { indices: best_sel, initial_objective, objective: best })
}

/// Select `k` maximally separated codes; the result is relabelled `0..k`
/// in pool order.
pub fn select_codes(pool: &Codebook, k: usize, schedule: &AnnealSchedule) -> Result<Codebook> {
    let sel = anneal_subset(pool, k, schedule)?;
    pool.subset(&sel.indices)
}

/// Unordered pairs of 8-neighbour cells in a row-major grid.
pub fn adjacent_cells(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let a = r * cols + c;
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols {
                    pairs.push((a, nr as usize * cols + nc as usize));
                }
            }
        }
    }
    pairs
}

fn class_distances(codebook: &Codebook) -> Vec<Vec<f64>> {
    let seqs = codebook.sequences();
    let n = seqs.len();
    let mut d = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let v = euclidean(seqs[a].frames(), seqs[b].frames());
            d[a][b] = v;
            d[b][a] = v;
        }
    }
    d
}

fn layout_score(dist: &[Vec<f64>], pairs: &[(usize, usize)], class_of_cell: &[usize]) -> f64 {
    pairs.iter().map(|&(a, b)| dist[class_of_cell[a]][class_of_cell[b]]).fold(f64::INFINITY, f64::min)
}

/// Minimum code distance over all 8-neighbour pairs of the layout.
pub fn layout_objective(codebook: &Codebook, layout: &GridLayout) -> Result<f64> {
    layout.validate(codebook.len())?;
    let dist = class_distances(codebook);
    Ok(layout_score(&dist, &adjacent_cells(layout.rows, layout.cols), &layout.class_of_cell()))
}

/// Anneal the class-to-cell assignment so that neighbouring targets are
/// as distinct as possible. Starts from the identity layout.
pub fn optimize_layout(codebook: &Codebook, rows: usize, cols: usize, schedule: &AnnealSchedule) -> Result<Codebook> {
    let n = codebook.len();
    if rows * cols != n {
        return Err(Error::arg(format!("{rows}x{cols} grid cannot hold {n} codes")));
    }
    schedule.validate()?;
    let dist = class_distances(codebook);
    let pairs = adjacent_cells(rows, cols);
    let mut class_of_cell: Vec<usize> = (0..n).collect();
    let mut current = layout_score(&dist, &pairs, &class_of_cell);
    let mut best = current;
    let mut best_perm = class_of_cell.clone();

    if n >= 2 && !pairs.is_empty() {
        let mut rng = rng_for(schedule.seed, &[0x4C_41]);
        for temp in schedule.temperatures() {
            for _ in 0..schedule.iters_per_temp {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                class_of_cell.swap(a, b);
                let cand = layout_score(&dist, &pairs, &class_of_cell);
                let delta = cand - current;
                if delta >= 0.0 || rng.random::<f64>() < (delta / temp).exp() {
                    current = cand;
                    if current > best {
                        best = current;
                        best_perm.clone_from(&class_of_cell);
                    }
                } else {
                    class_of_cell.swap(a, b);
                }
            }
        }
    }
    let mut cell_of_class = vec![0; n];
    for (cell, &class) in best_perm.iter().enumerate() {
        cell_of_class[class] = cell;
    }
    codebook.with_layout(GridLayout { rows, cols, cell_of_class })
}

/// Sampled sinusoidal JFPM codes, `0.5 * (1 + sin(2 pi f_i t + phi_i))` at
/// the display frame instants.
pub fn generate_jfpm(spec: &JfpmSpec, n_frames: usize) -> Result<Codebook> {
    spec.validate()?;
    if n_frames == 0 {
        return Err(Error::arg("JFPM codes need at least one frame"));
    }
    let sequences = (0..spec.n_targets)
        .map(|i| {
            let (f, phi) = (spec.frequency(i), spec.phase(i));
            let frames = (0..n_frames)
                .map(|j| {
                    let t = j as f64 / spec.frame_rate_hz;
                    (0.5 * (1.0 + (2.0 * PI * f * t + phi).sin())).clamp(0.0, 1.0)
                })
                .collect();
            StimulusSequence::new(i, frames, spec.frame_rate_hz)
        })
        .collect::<Result<Vec<_>>>()?;
    Codebook::new(sequences, CodeKind::Jfpm, None)
}
