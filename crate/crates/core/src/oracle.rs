//! Brute-force references: exact top-`B` by full logit, recall of a
//! candidate set, and per-row candidate lists for comparison with the
//! shared list.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::band_index::HitMatrix;
use crate::candidates::{select_candidates, CandidateSet};
use crate::decoder::logits_with_bias;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Exact top words of one row, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopWords {
    pub ids: Vec<u32>,
    pub logits: Vec<f32>,
}

fn by_logit_then_id(a: &(u32, f32), b: &(u32, f32)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Per row of `h`, the `b_out` words with the largest `H[i] . E[j] + bias[j]`,
/// descending, ties by ascending id.
pub fn exact_topb(h: &Matrix, e: &Matrix, bias: Option<&[f32]>, b_out: usize) -> Result<Vec<TopWords>> {
    if b_out > e.rows() {
        return Err(Error::Config(format!(
            "requested top {b_out} of {} words",
            e.rows()
        )));
    }
    let logits = logits_with_bias(h, e, bias)?;
    Ok((0..h.rows())
        .into_par_iter()
        .map(|i| {
            let mut pairs: Vec<(u32, f32)> = logits
                .row(i)
                .iter()
                .enumerate()
                .map(|(j, &x)| (j as u32, x))
                .collect();
            if b_out < pairs.len() && b_out > 0 {
                pairs.select_nth_unstable_by(b_out - 1, by_logit_then_id);
            }
            pairs.truncate(b_out);
            pairs.sort_by(by_logit_then_id);
            TopWords {
                ids: pairs.iter().map(|p| p.0).collect(),
                logits: pairs.iter().map(|p| p.1).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub per_row: Vec<f64>,
    pub mean: f64,
}

/// `|top_i ∩ candidates| / |top_i|` per row, and the mean over rows.
pub fn recall_at_b(cands: &CandidateSet, exact: &[TopWords]) -> Recall {
    let per_row: Vec<f64> = exact
        .iter()
        .map(|t| {
            if t.ids.is_empty() {
                return 1.0;
            }
            let hit = t.ids.iter().filter(|&&j| cands.contains(j)).count();
            hit as f64 / t.ids.len() as f64
        })
        .collect();
    let mean = if per_row.is_empty() {
        1.0
    } else {
        per_row.iter().sum::<f64>() / per_row.len() as f64
    };
    Recall { per_row, mean }
}

/// One threshold-selected list per beam row, without sharing.
pub fn per_beam_candidates(hits: &HitMatrix, t: u32) -> Vec<CandidateSet> {
    (0..hits.beams())
        .map(|i| {
            let row = HitMatrix::from_rows(&[hits.row(i).to_vec()]).expect("single row");
            select_candidates(&row, t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_vocab_sorted_by_logit() {
        let h = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let e = Matrix::from_rows(&[[0.5, 0.0], [2.0, 1.0], [-1.0, 3.0]]).unwrap();
        let top = exact_topb(&h, &e, None, 3).unwrap();
        assert_eq!(top[0].ids, vec![1, 0, 2]);
        assert_eq!(top[0].logits, vec![2.0, 0.5, -1.0]);
        assert!(exact_topb(&h, &e, None, 4).is_err());
    }

    #[test]
    fn orthogonal_row_breaks_ties_by_id() {
        let h = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let e = Matrix::from_rows(&[[1.0, 0.0]; 6]).unwrap();
        let top = exact_topb(&h, &e, None, 4).unwrap();
        assert_eq!(top[0].ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn bias_enters_ranking() {
        let h = Matrix::from_rows(&[[1.0]]).unwrap();
        let e = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let top = exact_topb(&h, &e, Some(&[5.0, 0.0]), 1).unwrap();
        assert_eq!(top[0].ids, vec![0]);
    }

    #[test]
    fn recall_examples() {
        let exact = vec![TopWords {
            ids: vec![1, 2, 3, 4],
            logits: vec![0.0; 4],
        }];
        assert_eq!(recall_at_b(&CandidateSet::from_ids([2, 4, 7]), &exact).mean, 0.5);
        assert_eq!(recall_at_b(&CandidateSet::from_ids(0..10), &exact).mean, 1.0);
        assert_eq!(recall_at_b(&CandidateSet::from_ids([9]), &exact).mean, 0.0);
    }

    #[test]
    fn per_beam_lists() {
        let l = HitMatrix::from_rows(&[vec![2, 0], vec![0, 2]]).unwrap();
        let lists = per_beam_candidates(&l, 2);
        assert_eq!(lists[0].ids(), &[0]);
        assert_eq!(lists[1].ids(), &[1]);
        assert_eq!(select_candidates(&l, 2).ids(), &[0, 1]);

        let single = HitMatrix::from_rows(&[vec![3, 1, 4, 0]]).unwrap();
        assert_eq!(per_beam_candidates(&single, 2)[0], select_candidates(&single, 2));

        let same = HitMatrix::from_rows(&[vec![1, 3, 0], vec![1, 3, 0]]).unwrap();
        let lists = per_beam_candidates(&same, 1);
        assert_eq!(lists[0], lists[1]);
        assert_eq!(select_candidates(&same, 1).len(), lists[0].len());
    }
}
