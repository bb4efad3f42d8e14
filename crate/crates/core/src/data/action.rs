use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of dose bins per drug (bin 0 is "no drug").
pub const N_BINS: usize = 5;
/// Size of the joint IV x vasopressor action grid.
pub const N_ACTIONS: usize = N_BINS * N_BINS;

/// Joint (IV fluid, vasopressor) dose bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    iv_bin: u8,
    vp_bin: u8,
}

impl Action {
    pub fn new(iv_bin: usize, vp_bin: usize) -> Result<Self> {
        if iv_bin >= N_BINS || vp_bin >= N_BINS {
            return Err(Error::Domain(format!(
                "dose bins ({iv_bin}, {vp_bin}) outside 0..{N_BINS}"
            )));
        }
        Ok(Self {
            iv_bin: iv_bin as u8,
            vp_bin: vp_bin as u8,
        })
    }

    pub fn from_flat(index: usize) -> Result<Self> {
        if index >= N_ACTIONS {
            return Err(Error::Domain(format!(
                "action index {index} outside 0..{N_ACTIONS}"
            )));
        }
        Self::new(index / N_BINS, index % N_BINS)
    }

    pub fn iv_bin(self) -> usize {
        self.iv_bin as usize
    }

    pub fn vp_bin(self) -> usize {
        self.vp_bin as usize
    }

    pub fn flat_index(self) -> usize {
        N_BINS * self.iv_bin as usize + self.vp_bin as usize
    }
}

/// Raw per-drug doses for one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Doses {
    pub iv: f64,
    pub vp: f64,
}

/// Quartile thresholds of the nonzero doses of each drug.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBins {
    pub iv_quartiles: [f64; 3],
    pub vp_quartiles: [f64; 3],
}

impl ActionBins {
    pub fn new(iv_quartiles: [f64; 3], vp_quartiles: [f64; 3]) -> Result<Self> {
        for q in [iv_quartiles, vp_quartiles] {
            let ordered = q[0] <= q[1] && q[1] <= q[2];
            if !ordered || q[0] <= 0.0 || q.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "quartiles {q:?} must be finite, positive and nondecreasing"
                )));
            }
        }
        Ok(Self {
            iv_quartiles,
            vp_quartiles,
        })
    }

    pub fn discretize(&self, doses: Doses) -> Result<Action> {
        Action::new(
            bin_dose(doses.iv, &self.iv_quartiles)?,
            bin_dose(doses.vp, &self.vp_quartiles)?,
        )
    }
}

/// Fits per-drug quartiles (nearest-rank) over all strictly positive doses.
pub fn fit_action_bins(raw_doses: &[Doses]) -> Result<ActionBins> {
    let mut iv = Vec::new();
    let mut vp = Vec::new();
    for d in raw_doses {
        for (v, name) in [(d.iv, "iv"), (d.vp, "vp")] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Domain(format!("{name} dose {v} is not a finite nonnegative number")));
            }
        }
        if d.iv > 0.0 {
            iv.push(d.iv);
        }
        if d.vp > 0.0 {
            vp.push(d.vp);
        }
    }
    ActionBins::new(nonzero_quartiles(iv, "iv")?, nonzero_quartiles(vp, "vp")?)
}

fn nonzero_quartiles(mut values: Vec<f64>, drug: &str) -> Result<[f64; 3]> {
    let n = values.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "{drug}: need at least 4 nonzero doses, found {n}"
        )));
    }
    values.sort_by(f64::total_cmp);
    // nearest rank: the ceil(k n / 4)-th smallest value, 1-based
    let rank = |k: usize| (k * n).div_ceil(4);
    Ok([values[rank(1) - 1], values[rank(2) - 1], values[rank(3) - 1]])
}

/// Maps a dose to its bin: 0 for no drug, 1..=4 for the quartile intervals
/// (upper bounds inclusive).
pub fn bin_dose(dose: f64, quartiles: &[f64; 3]) -> Result<usize> {
    if !dose.is_finite() || dose < 0.0 {
        return Err(Error::Domain(format!(
            "dose {dose} is not a finite nonnegative number"
        )));
    }
    if dose == 0.0 {
        return Ok(0);
    }
    let bin = quartiles.iter().take_while(|&&q| dose > q).count();
    Ok(bin + 1)
}
