//! Linear-chain CRF over a fixed tag alphabet, in log space.
//!
//! `transitions[i][j]` scores moving from tag `i` to tag `j`.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CrfScores<'a> {
    pub emissions: &'a Tensor,
    pub transitions: &'a Tensor,
    pub start: &'a [f64],
    pub end: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfGrads {
    pub emissions: Tensor,
    pub transitions: Tensor,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl<'a> CrfScores<'a> {
    pub fn new(emissions: &'a Tensor, transitions: &'a Tensor, start: &'a [f64], end: &'a [f64]) -> Result<Self> {
        let l = emissions.cols();
        if emissions.rows() == 0 {
            return Err(shape_err!("CRF needs at least one position"));
        }
        if transitions.shape() != (l, l) || start.len() != l || end.len() != l {
            return Err(shape_err!(
                "CRF potentials disagree: emissions {:?}, transitions {:?}, start {}, end {}",
                emissions.shape(),
                transitions.shape(),
                start.len(),
                end.len()
            ));
        }
        Ok(CrfScores {
            emissions,
            transitions,
            start,
            end,
        })
    }

    pub fn len(&self) -> usize {
        self.emissions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.rows() == 0
    }

    pub fn num_tags(&self) -> usize {
        self.emissions.cols()
    }

    fn check_tags(&self, tags: &[usize]) -> Result<()> {
        if tags.len() != self.len() {
            return Err(shape_err!(
                "tag sequence length {} does not match {} positions",
                tags.len(),
                self.len()
            ));
        }
        if let Some(&t) = tags.iter().find(|&&t| t >= self.num_tags()) {
            return Err(invalid!("tag id {t} out of range for {} tags", self.num_tags()));
        }
        Ok(())
    }

    pub fn path_score(&self, tags: &[usize]) -> Result<f64> {
        self.check_tags(tags)?;
        let mut s = self.start[tags[0]] + self.emissions.get(0, tags[0]);
        for t in 1..tags.len() {
            s += self.transitions.get(tags[t - 1], tags[t]) + self.emissions.get(t, tags[t]);
        }
        Ok(s + self.end[tags[tags.len() - 1]])
    }

    fn forward_table(&self) -> Tensor {
        let (n, l) = self.emissions.shape();
        let mut alpha = Tensor::zeros(n, l);
        for j in 0..l {
            alpha.set(0, j, self.start[j] + self.emissions.get(0, j));
        }
        for t in 1..n {
            for j in 0..l {
                let prev = alpha.row(t - 1);
                let v = log_sum_exp((0..l).map(|i| prev[i] + self.transitions.get(i, j)));
                alpha.set(t, j, v + self.emissions.get(t, j));
            }
        }
        alpha
    }

    fn backward_table(&self) -> Tensor {
        let (n, l) = self.emissions.shape();
        let mut beta = Tensor::zeros(n, l);
        beta.row_mut(n - 1).copy_from_slice(self.end);
        for t in (0..n - 1).rev() {
            for i in 0..l {
                let next = beta.row(t + 1);
                let v = log_sum_exp(
                    (0..l).map(|j| self.transitions.get(i, j) + self.emissions.get(t + 1, j) + next[j]),
                );
                beta.set(t, i, v);
            }
        }
        beta
    }

    pub fn log_partition(&self) -> f64 {
        let alpha = self.forward_table();
        let last = alpha.row(self.len() - 1);
        log_sum_exp((0..self.num_tags()).map(|j| last[j] + self.end[j]))
    }

    /// `-log p(tags | scores)`.
    pub fn nll(&self, tags: &[usize]) -> Result<f64> {
        Ok(self.log_partition() - self.path_score(tags)?)
    }

    /// Negative log-likelihood together with its gradient w.r.t. every potential,
    /// computed from forward-backward marginals.
    pub fn nll_with_grads(&self, tags: &[usize]) -> Result<(f64, CrfGrads)> {
        let gold = self.path_score(tags)?;
        let (n, l) = self.emissions.shape();
        let alpha = self.forward_table();
        let beta = self.backward_table();
        let last = alpha.row(n - 1);
        let log_z = log_sum_exp((0..l).map(|j| last[j] + self.end[j]));

        let mut d_emit = Tensor::zeros(n, l);
        for t in 0..n {
            for j in 0..l {
                d_emit.set(t, j, (alpha.get(t, j) + beta.get(t, j) - log_z).exp());
            }
        }
        let mut d_trans = Tensor::zeros(l, l);
        for t in 0..n - 1 {
            for i in 0..l {
                let a = alpha.get(t, i);
                for j in 0..l {
                    let lp = a + self.transitions.get(i, j) + self.emissions.get(t + 1, j) + beta.get(t + 1, j)
                        - log_z;
                    let cur = d_trans.get(i, j);
                    d_trans.set(i, j, cur + lp.exp());
                }
            }
        }
        let mut d_start = d_emit.row(0).to_vec();
        let mut d_end = d_emit.row(n - 1).to_vec();

        for (t, &y) in tags.iter().enumerate() {
            let cur = d_emit.get(t, y);
            d_emit.set(t, y, cur - 1.0);
            if t > 0 {
                let p = tags[t - 1];
                let cur = d_trans.get(p, y);
                d_trans.set(p, y, cur - 1.0);
            }
        }
        d_start[tags[0]] -= 1.0;
        d_end[tags[n - 1]] -= 1.0;

        Ok((
            log_z - gold,
            CrfGrads {
                emissions: d_emit,
                transitions: d_trans,
                start: d_start,
                end: d_end,
            },
        ))
    }

    /// Highest-scoring tag path and its score. Ties resolve to the lowest tag id.
    pub fn viterbi(&self) -> (Vec<usize>, f64) {
        let (n, l) = self.emissions.shape();
        let mut score: Vec<f64> = (0..l).map(|j| self.start[j] + self.emissions.get(0, j)).collect();
        let mut back = vec![0usize; n * l];
        for t in 1..n {
            let mut next = vec![0.0; l];
            for j in 0..l {
                let mut best = 0;
                let mut best_v = score[0] + self.transitions.get(0, j);
                for i in 1..l {
                    let v = score[i] + self.transitions.get(i, j);
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                back[t * l + j] = best;
                next[j] = best_v + self.emissions.get(t, j);
            }
            score = next;
        }
        let mut last = 0;
        let mut best_v = score[0] + self.end[0];
        for j in 1..l {
            let v = score[j] + self.end[j];
            if v > best_v {
                best_v = v;
                last = j;
            }
        }
        let mut path = vec![0usize; n];
        path[n - 1] = last;
        for t in (1..n).rev() {
            path[t - 1] = back[t * l + path[t]];
        }
        (path, best_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(n: usize, l: usize) -> (Tensor, Tensor, Vec<f64>, Vec<f64>) {
        (Tensor::zeros(n, l), Tensor::zeros(l, l), vec![0.0; l], vec![0.0; l])
    }

    #[test]
    fn uniform_scores_give_log_of_path_count() {
        let (e, t, s, en) = zeros(2, 2);
        let crf = CrfScores::new(&e, &t, &s, &en).unwrap();
        for tags in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            assert!((crf.nll(&tags).unwrap() - 4f64.ln()).abs() < 1e-12);
        }
        assert!((4f64.ln() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn single_position_viterbi_is_argmax_of_start_emission_end() {
        let e = Tensor::row_vector(vec![0.1, 0.9, 0.3]);
        let t = Tensor::zeros(3, 3);
        let s = vec![0.0, -1.0, 0.5];
        let en = vec![0.2, 0.0, 0.0];
        let crf = CrfScores::new(&e, &t, &s, &en).unwrap();
        let (path, score) = crf.viterbi();
        assert_eq!(path, vec![2]);
        assert!((score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn strong_emissions_decode_to_constant_sequence() {
        let mut e = Tensor::zeros(5, 4);
        for t in 0..5 {
            e.set(t, 2, 10.0);
        }
        let (_, t, s, en) = zeros(5, 4);
        let crf = CrfScores::new(&e, &t, &s, &en).unwrap();
        assert_eq!(crf.viterbi().0, vec![2; 5]);
    }

    #[test]
    fn ties_break_to_lowest_tag() {
        let (e, t, s, en) = zeros(3, 3);
        let crf = CrfScores::new(&e, &t, &s, &en).unwrap();
        assert_eq!(crf.viterbi().0, vec![0, 0, 0]);
    }

    #[test]
    fn rejects_bad_tags_and_shapes() {
        let (e, t, s, en) = zeros(2, 3);
        let crf = CrfScores::new(&e, &t, &s, &en).unwrap();
        assert!(crf.nll(&[0]).is_err());
        assert!(crf.nll(&[0, 3]).is_err());
        assert!(CrfScores::new(&e, &Tensor::zeros(2, 2), &s, &en).is_err());
        let empty = Tensor::zeros(0, 3);
        assert!(CrfScores::new(&empty, &t, &s, &en).is_err());
    }
}
