use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Result};
use crate::mixers::MambaBlock;

pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "by")]
pub enum GroupBy {
    SequenceLength,
    /// Splits 1-based steps into `t < marker` and `t >= marker`.
    Timestep {
        marker: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayHistogram {
    pub edges: Vec<f64>,
    pub group_by: GroupBy,
    pub groups: Vec<String>,
    /// `counts[group][bin]`
    pub counts: Vec<Vec<u64>>,
    pub model_id: String,
    pub dataset_id: String,
}

impl DecayHistogram {
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn group_total(&self, g: usize) -> u64 {
        self.counts[g].iter().sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.groups.len()).map(|g| self.group_total(g)).sum()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == name)
    }

    /// Fraction of a group's mass in bin `bin`.
    pub fn proportion(&self, g: usize, bin: usize) -> f64 {
        let tot = self.group_total(g);
        if tot == 0 {
            0.0
        } else {
            self.counts[g][bin] as f64 / tot as f64
        }
    }

    /// Fraction of all mass in bin `bin`.
    pub fn overall_proportion(&self, bin: usize) -> f64 {
        let tot = self.total();
        if tot == 0 {
            return 0.0;
        }
        self.counts.iter().map(|c| c[bin]).sum::<u64>() as f64 / tot as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["bin_left", "bin_right", "group", "count"])?;
        for (g, name) in self.groups.iter().enumerate() {
            for b in 0..self.bins() {
                wr.write_record([
                    self.edges[b].to_string(),
                    self.edges[b + 1].to_string(),
                    name.clone(),
                    self.counts[g][b].to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn bin_index(v: f64, bins: usize) -> usize {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Histogram of every per-step decay factor `e^{-λΔ_t}` over `sequences`.
pub fn decay_histogram(
    model: &MambaBlock,
    sequences: &[Vec<usize>],
    bins: usize,
    group_by: GroupBy,
    model_id: &str,
    dataset_id: &str,
) -> Result<DecayHistogram> {
    if bins == 0 {
        bail_invalid!("need at least one bin");
    }
    let per_step = model.d * model.n;
    let mut groups: Vec<String> = match group_by {
        GroupBy::Timestep { marker } => vec![format!("t<{marker}"), format!("t>={marker}")],
        GroupBy::SequenceLength => vec![],
    };
    let mut counts: Vec<Vec<u64>> = vec![vec![0; bins]; groups.len()];
    let mut lengths: Vec<usize> = vec![];
    for seq in sequences {
        let a = model.decay_factors(seq)?;
        for (t, chunk) in a.chunks(per_step).enumerate() {
            let g = match group_by {
                GroupBy::Timestep { marker } => usize::from(t + 1 >= marker),
                GroupBy::SequenceLength => match lengths.iter().position(|&l| l == seq.len()) {
                    Some(g) => g,
                    None => {
                        lengths.push(seq.len());
                        groups.push(format!("T={}", seq.len()));
                        counts.push(vec![0; bins]);
                        lengths.len() - 1
                    }
                },
            };
            for &v in chunk {
                counts[g][bin_index(v, bins)] += 1;
            }
        }
    }
    if let GroupBy::SequenceLength = group_by {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by_key(|&i| lengths[i]);
        groups = order.iter().map(|&i| groups[i].clone()).collect();
        counts = order.iter().map(|&i| counts[i].clone()).collect();
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok(DecayHistogram {
        edges,
        group_by,
        groups,
        counts,
        model_id: model_id.into(),
        dataset_id: dataset_id.into(),
    })
}

/// `λ Σ_{r=1}^T Δ_r` per `(channel, state)`, i.e. `-Σ log e^{-λΔ_r}`, for one
/// sequence of a block. Returned row-major `[d, N]`.
pub fn block_exponent_sums(model: &MambaBlock, tokens: &[usize]) -> Result<Vec<f64>> {
    let per_step = model.d * model.n;
    let a = model.decay_factors(tokens)?;
    let mut out = vec![0.0; per_step];
    for chunk in a.chunks(per_step) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o -= v.ln();
        }
    }
    Ok(out)
}
