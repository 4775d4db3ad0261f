//! Emission scoring and a first-order linear-chain CRF over `B/M/E/S`.
//!
//! The path score of labels `y` is `Σ_i s[i][y_i] + Σ_{i≥1} trans[y_{i-1}][y_i]`:
//! the unary score of the first position is included and there are no
//! start/end transition vectors. All arithmetic is `f64` in log space.

use crate::corpus::{Label, NUM_LABELS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub type Transitions = [[f64; NUM_LABELS]; NUM_LABELS];
pub type ScoreRow = [f64; NUM_LABELS];

/// Emission head `W_s [2·d_h, 4]`, `b_s [4]` and transition matrix `[4, 4]`
/// where `trans[prev][next]` scores moving from `prev` to `next`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams<T> {
    pub w_s: T,
    pub b_s: T,
    pub trans: T,
}

impl<T> CrfParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> CrfParams<U> {
        CrfParams {
            w_s: f("crf.W_s", &self.w_s),
            b_s: f("crf.b_s", &self.b_s),
            trans: f("crf.trans", &self.trans),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut T)) {
        f("crf.W_s", &mut self.w_s);
        f("crf.b_s", &mut self.b_s);
        f("crf.trans", &mut self.trans);
    }
}

impl CrfParams<Tensor> {
    pub fn transitions(&self) -> Result<Transitions> {
        to_transitions(&self.trans)
    }
}

pub fn to_transitions(t: &Tensor) -> Result<Transitions> {
    if t.shape() != [NUM_LABELS, NUM_LABELS] {
        return Err(Error::shape("transitions", t.shape(), &[NUM_LABELS, NUM_LABELS]));
    }
    let mut out = [[0.0; NUM_LABELS]; NUM_LABELS];
    for (i, row) in out.iter_mut().enumerate() {
        row.copy_from_slice(t.row(i));
    }
    Ok(out)
}

/// Rows of an `[n, 4]` score tensor.
pub fn score_rows(t: &Tensor) -> Result<Vec<ScoreRow>> {
    let (n, k) = t.require_matrix("score_rows")?;
    if k != NUM_LABELS {
        return Err(Error::shape("score_rows", t.shape(), &[n, NUM_LABELS]));
    }
    Ok((0..n)
        .map(|r| {
            let mut row = [0.0; NUM_LABELS];
            row.copy_from_slice(t.row(r));
            row
        })
        .collect())
}

/// Converts raw label ids, rejecting anything outside `0..4`.
pub fn labels_from_ids(ids: &[usize]) -> Result<Vec<Label>> {
    ids.iter()
        .map(|&i| Label::from_index(i).ok_or_else(|| Error::invalid(format!("invalid tag id {i}"))))
        .collect()
}

/// `s(X, i) = [h_domain; h_shared] · W_s + b_s`, row by row.
pub fn emission_scores(h_domain: &Tensor, h_shared: &Tensor, params: &CrfParams<Tensor>) -> Result<Tensor> {
    let g = Graph::inference();
    let p = params.map(&mut |_, t| g.constant(t.clone()));
    let out = emission_scores_graph(&g, g.constant(h_domain.clone()), g.constant(h_shared.clone()), &p)?;
    Ok((*out.value()).clone())
}

pub fn emission_scores_graph<'g>(
    g: &'g Graph,
    h_domain: Var<'g>,
    h_shared: Var<'g>,
    params: &CrfParams<Var<'g>>,
) -> Result<Var<'g>> {
    if h_domain.shape() != h_shared.shape() {
        return Err(Error::shape("emission_scores", &h_domain.shape(), &h_shared.shape()));
    }
    let x = g.concat_cols(h_domain, h_shared)?;
    g.linear(x, params.w_s, params.b_s)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn forward(scores: &[ScoreRow], trans: &Transitions) -> Vec<ScoreRow> {
    let mut alpha = Vec::with_capacity(scores.len());
    alpha.push(scores[0]);
    for s in &scores[1..] {
        let prev = *alpha.last().unwrap();
        let mut cur = [0.0; NUM_LABELS];
        for (y, c) in cur.iter_mut().enumerate() {
            let terms: [f64; NUM_LABELS] = std::array::from_fn(|p| prev[p] + trans[p][y]);
            *c = s[y] + log_sum_exp(&terms);
        }
        alpha.push(cur);
    }
    alpha
}

fn backward_pass(scores: &[ScoreRow], trans: &Transitions) -> Vec<ScoreRow> {
    let n = scores.len();
    let mut beta = vec![[0.0; NUM_LABELS]; n];
    for i in (0..n - 1).rev() {
        for y in 0..NUM_LABELS {
            let terms: [f64; NUM_LABELS] = std::array::from_fn(|nx| trans[y][nx] + scores[i + 1][nx] + beta[i + 1][nx]);
            beta[i][y] = log_sum_exp(&terms);
        }
    }
    beta
}

fn require_nonempty(scores: &[ScoreRow], op: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid(format!("{op} needs at least one position")));
    }
    Ok(())
}

/// `log Σ_{Y'} exp(score(Y'))` by the forward algorithm.
pub fn log_partition(scores: &[ScoreRow], trans: &Transitions) -> Result<f64> {
    require_nonempty(scores, "log_partition")?;
    Ok(log_sum_exp(forward(scores, trans).last().unwrap()))
}

pub fn path_score(scores: &[ScoreRow], trans: &Transitions, tags: &[Label]) -> Result<f64> {
    if scores.len() != tags.len() {
        return Err(Error::shape("path_score", &[scores.len()], &[tags.len()]));
    }
    let mut total = 0.0;
    for (i, (s, t)) in scores.iter().zip(tags).enumerate() {
        total += s[t.index()];
        if i > 0 {
            total += trans[tags[i - 1].index()][t.index()];
        }
    }
    Ok(total)
}

/// `log p(tags | X)`.
pub fn log_likelihood(scores: &[ScoreRow], trans: &Transitions, tags: &[Label]) -> Result<f64> {
    let path = path_score(scores, trans, tags)?;
    Ok(path - log_partition(scores, trans)?)
}

/// Highest-scoring label sequence and its path score. Ties go to the lower
/// label index, both for the final label and at every backpointer.
pub fn viterbi(scores: &[ScoreRow], trans: &Transitions) -> Result<(Vec<Label>, f64)> {
    require_nonempty(scores, "viterbi")?;
    let n = scores.len();
    let mut delta = scores[0];
    let mut back = vec![[0usize; NUM_LABELS]; n];
    for i in 1..n {
        let mut next = [0.0; NUM_LABELS];
        for y in 0..NUM_LABELS {
            let mut best = 0;
            let mut best_val = delta[0] + trans[0][y];
            for p in 1..NUM_LABELS {
                let v = delta[p] + trans[p][y];
                if v > best_val {
                    best = p;
                    best_val = v;
                }
            }
            back[i][y] = best;
            next[y] = best_val + scores[i][y];
        }
        delta = next;
    }
    let mut last = 0;
    for y in 1..NUM_LABELS {
        if delta[y] > delta[last] {
            last = y;
        }
    }
    let best_score = delta[last];
    let mut path = vec![Label::B; n];
    let mut cur = last;
    for i in (0..n).rev() {
        path[i] = Label::from_index(cur).unwrap();
        if i > 0 {
            cur = back[i][cur];
        }
    }
    Ok((path, best_score))
}

/// Largest length accepted by [`posterior_brute_force`].
pub const BRUTE_FORCE_MAX_LEN: usize = 8;

/// Calls `f` with every label sequence of length `n`, in lexicographic order.
pub fn for_each_sequence(n: usize, mut f: impl FnMut(&[Label])) {
    let mut seq = vec![Label::B; n];
    let total = NUM_LABELS.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for i in (0..n).rev() {
            seq[i] = Label::from_index(c % NUM_LABELS).unwrap();
            c /= NUM_LABELS;
        }
        f(&seq);
    }
}

/// `p(tags | X)` by explicit enumeration of all `4^n` sequences.
pub fn posterior_brute_force(scores: &[ScoreRow], trans: &Transitions, tags: &[Label]) -> Result<f64> {
    let n = scores.len();
    if n > BRUTE_FORCE_MAX_LEN {
        return Err(Error::invalid(format!(
            "brute force limited to {BRUTE_FORCE_MAX_LEN} positions, got {n}"
        )));
    }
    let target = path_score(scores, trans, tags)?;
    let mut z = 0.0;
    for_each_sequence(n, |seq| {
        z += path_score(scores, trans, seq).unwrap().exp();
    });
    Ok(target.exp() / z)
}

/// Posterior marginals from forward-backward.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub log_partition: f64,
    /// `p(y_i = y)`, one row per position.
    pub node: Vec<ScoreRow>,
    /// `Σ_i p(y_{i-1} = a, y_i = b)`.
    pub transitions: Transitions,
}

pub fn marginals(scores: &[ScoreRow], trans: &Transitions) -> Result<Marginals> {
    require_nonempty(scores, "marginals")?;
    let alpha = forward(scores, trans);
    let beta = backward_pass(scores, trans);
    let log_z = log_sum_exp(alpha.last().unwrap());
    let node = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| std::array::from_fn(|y| (a[y] + b[y] - log_z).exp()))
        .collect();
    let mut pair = [[0.0; NUM_LABELS]; NUM_LABELS];
    for i in 1..scores.len() {
        for (p, row) in pair.iter_mut().enumerate() {
            for (y, cell) in row.iter_mut().enumerate() {
                *cell += (alpha[i - 1][p] + trans[p][y] + scores[i][y] + beta[i][y] - log_z).exp();
            }
        }
    }
    Ok(Marginals {
        log_partition: log_z,
        node,
        transitions: pair,
    })
}

/// Summed negative log-likelihood of packed sequences.
///
/// `emissions` is `[rows, 4]`; each `(start, len)` span of rows is one
/// sentence whose gold labels are `tags[start..start + len]`. The gradient is
/// `marginals − one-hot(gold)` for emissions and expected minus observed
/// transition counts for `trans`.
pub fn nll_graph<'g>(
    g: &'g Graph,
    emissions: Var<'g>,
    trans: Var<'g>,
    spans: &[(usize, usize)],
    tags: &[Label],
) -> Result<Var<'g>> {
    let ev = emissions.value();
    let rows = score_rows(&ev)?;
    if tags.len() != rows.len() {
        return Err(Error::shape("crf_nll", &[rows.len()], &[tags.len()]));
    }
    let tr = to_transitions(&trans.value())?;
    let mut total = 0.0;
    let mut d_emit = vec![0.0; rows.len() * NUM_LABELS];
    let mut d_trans = [[0.0; NUM_LABELS]; NUM_LABELS];
    for &(start, len) in spans {
        if len == 0 {
            continue;
        }
        if start + len > rows.len() {
            return Err(Error::invalid(format!(
                "span {start}+{len} exceeds {} rows",
                rows.len()
            )));
        }
        let s = &rows[start..start + len];
        let t = &tags[start..start + len];
        let m = marginals(s, &tr)?;
        total += m.log_partition - path_score(s, &tr, t)?;
        for (i, (node, gold)) in m.node.iter().zip(t).enumerate() {
            let r = (start + i) * NUM_LABELS;
            for y in 0..NUM_LABELS {
                d_emit[r + y] += node[y];
            }
            d_emit[r + gold.index()] -= 1.0;
        }
        for (row, m_row) in d_trans.iter_mut().zip(&m.transitions) {
            for (d, x) in row.iter_mut().zip(m_row) {
                *d += x;
            }
        }
        for w in t.windows(2) {
            d_trans[w[0].index()][w[1].index()] -= 1.0;
        }
    }
    let n = rows.len();
    Ok(g.custom(&[emissions, trans], Tensor::scalar(total), move |out| {
        let c = out.item();
        let de = Tensor::new(vec![n, NUM_LABELS], d_emit.iter().map(|x| x * c).collect()).unwrap();
        let dt = Tensor::new(
            vec![NUM_LABELS, NUM_LABELS],
            d_trans.iter().flatten().map(|x| x * c).collect(),
        )
        .unwrap();
        vec![Some(de), Some(dt)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Label::*;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<ScoreRow>, Transitions) {
        let scores = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))
            .collect();
        let trans = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)));
        (scores, trans)
    }

    fn brute_log_partition(scores: &[ScoreRow], trans: &Transitions) -> f64 {
        let mut z = 0.0;
        for_each_sequence(scores.len(), |seq| z += path_score(scores, trans, seq).unwrap().exp());
        z.ln()
    }

    #[test]
    fn partition_trivial_cases() {
        let zero = [[0.0; 4]; 4];
        assert!((log_partition(&[[0.0; 4]], &zero).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((log_partition(&[[0.0; 4]; 2], &zero).unwrap() - 16f64.ln()).abs() < 1e-14);
        assert!(log_partition(&[], &zero).is_err());
    }

    #[test]
    fn partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, t) = random_instance(&mut rng, 5);
        assert!((log_partition(&s, &t).unwrap() - brute_log_partition(&s, &t)).abs() < 1e-8);
    }

    #[test]
    fn likelihood_cases() {
        let zero = [[0.0; 4]; 4];
        assert!((log_likelihood(&[[0.0; 4]], &zero, &[B]).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, t) = random_instance(&mut rng, 4);
        let tags = [B, E, S, M];
        let ll = log_likelihood(&s, &t, &tags).unwrap();
        assert!(ll <= 0.0);
        assert!((ll.exp() - posterior_brute_force(&s, &t, &tags).unwrap()).abs() < 1e-8);
        assert!(log_likelihood(&s, &t, &[B]).is_err());
        assert!(labels_from_ids(&[0, 4]).is_err());
    }

    #[test]
    fn viterbi_cases() {
        let zero = [[0.0; 4]; 4];
        assert_eq!(viterbi(&[[0.0, 0.0, 1.0, 0.0]], &zero).unwrap().0, vec![E]);
        assert_eq!(viterbi(&[[0.0; 4]; 5], &zero).unwrap().0, vec![B; 5]);
        assert!(viterbi(&[], &zero).is_err());
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.gen_range(1..=6);
            let (s, t) = random_instance(&mut rng, n);
            let mut best: Option<(Vec<Label>, f64)> = None;
            for_each_sequence(n, |seq| {
                let v = path_score(&s, &t, seq).unwrap();
                if best.as_ref().is_none_or(|(_, b)| v > *b) {
                    best = Some((seq.to_vec(), v));
                }
            });
            let (path, score) = viterbi(&s, &t).unwrap();
            let (bp, bs) = best.unwrap();
            assert_eq!(path, bp);
            assert!((score - bs).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, t) = random_instance(&mut rng, 3);
        let mut total = 0.0;
        for_each_sequence(3, |seq| total += posterior_brute_force(&s, &t, seq).unwrap());
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(posterior_brute_force(&[[0.0; 4]], &[[0.0; 4]; 4], &[S]).unwrap(), 0.25);
        assert!(posterior_brute_force(&[[0.0; 4]; 9], &t, &[B; 9]).is_err());
    }

    #[test]
    fn log_shift_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut s, t) = random_instance(&mut rng, 4);
        let before = log_partition(&s, &t).unwrap();
        s[2].iter_mut().for_each(|x| *x += 1.75);
        assert!((log_partition(&s, &t).unwrap() - before - 1.75).abs() < 1e-12);
    }

    #[test]
    fn emission_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let hd = rand_t(&[3, 2]);
        let hs = rand_t(&[3, 2]);
        let p = CrfParams {
            w_s: rand_t(&[4, 4]),
            b_s: rand_t(&[4]),
            trans: Tensor::zeros([4, 4]),
        };
        let out = emission_scores(&hd, &hs, &p).unwrap();
        for i in 0..3 {
            let x = [hd.get(i, 0), hd.get(i, 1), hs.get(i, 0), hs.get(i, 1)];
            for y in 0..4 {
                let want: f64 = (0..4).map(|k| x[k] * p.w_s.get(k, y)).sum::<f64>() + p.b_s.data()[y];
                assert!((out.get(i, y) - want).abs() < 1e-12);
            }
        }
        let zero_w = CrfParams {
            w_s: Tensor::zeros([4, 4]),
            ..p.clone()
        };
        let out = emission_scores(&hd, &hs, &zero_w).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), p.b_s.data());
        }
        let empty = emission_scores(&Tensor::zeros([0, 2]), &Tensor::zeros([0, 2]), &p).unwrap();
        assert_eq!(empty.shape(), &[0, 4]);
        assert!(emission_scores(&hd, &rand_t(&[2, 2]), &p).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let emit = Tensor::new([5, 4], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let trans = Tensor::new([4, 4], (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let tags = [S, B, E, B, E];
        let report = grad_check(
            |g, p| nll_graph(g, p[0], p[1], &[(0, 2), (2, 3)], &tags),
            &[emit, trans],
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
