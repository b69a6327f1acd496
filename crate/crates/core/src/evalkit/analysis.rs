//! Rank correlation between learned coefficients and the persona axis.

use serde::{Deserialize, Serialize};

use crate::corpus::{PersonaSpec, TutorId};
use crate::error::{Error, Result};
use crate::steering::SteeringState;

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman's rank correlation (Pearson correlation of average ranks).
/// `None` when either side is constant or there are fewer than 2 values.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub tutor_id: TutorId,
    pub u: f64,
    pub delta: f64,
    /// Ground-truth position on the persona style axis.
    pub axis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// Sorted by descending delta.
    pub rows: Vec<DeltaRow>,
    pub spearman: Option<f64>,
    /// Fewer than 3 tutors: the correlation carries almost no information.
    pub low_power: bool,
    pub u_mean: f64,
    pub u_std: f64,
}

impl DeltaReport {
    /// `tutor_id,u,delta,axis` lines in tutor id order.
    pub fn to_csv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by_key(|r| r.tutor_id);
        let mut out = String::from("tutor_id,u,delta,axis\n");
        for r in rows {
            out.push_str(&format!("{},{},{},{}\n", r.tutor_id, r.u, r.delta, r.axis));
        }
        out
    }
}

/// Position on the persona style axis, running from rapport-rich
/// scaffolding (0) to direct, procedural help (1). This is `directness`;
/// in the one-dimensional layout it equals `1 - affect` and `1 - scaffold`.
pub fn style_axis(p: &PersonaSpec) -> f64 {
    p.directness
}

pub fn delta_analysis(state: &SteeringState, personas: &[PersonaSpec]) -> Result<DeltaReport> {
    let delta = state.delta().delta;
    let mut rows = Vec::with_capacity(state.tutor_ids.len());
    let mut missing = Vec::new();
    for (i, &t) in state.tutor_ids.iter().enumerate() {
        match personas.iter().find(|p| p.tutor_id == t) {
            Some(p) => rows.push(DeltaRow {
                tutor_id: t,
                u: state.u[i],
                delta: delta[i],
                axis: style_axis(p),
            }),
            None => missing.push(t),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("no persona for tutors {missing:?}")));
    }
    let d: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let a: Vec<f64> = rows.iter().map(|r| r.axis).collect();
    let rho = spearman(&d, &a);
    rows.sort_by(|x, y| y.delta.total_cmp(&x.delta).then(x.tutor_id.cmp(&y.tutor_id)));
    let n = state.u.len().max(1) as f64;
    let u_mean = state.u.iter().sum::<f64>() / n;
    let u_std = (state.u.iter().map(|x| (x - u_mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(DeltaReport {
        rows,
        spearman: rho,
        low_power: state.tutor_ids.len() < 3,
        u_mean,
        u_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 3.0, 2.0], &[1.0, 2.0, 3.0]), Some(0.5));
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
