//! CTC loss, greedy decoding, the brute-force alignment oracle and the token
//! vocabulary.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Seconds per encoder output frame (8 mel hops of 10 ms).
pub const FRAME_DURATION_S: f64 = 0.08;

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-frame log-distribution over the vocabulary; blank is the last id.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorLattice {
    log_probs: Tensor,
    pub frame_duration: f64,
}

impl PosteriorLattice {
    /// Wraps `[T, V]` natural-log probabilities; every row must normalize.
    pub fn new(log_probs: Tensor) -> Result<Self> {
        if log_probs.shape().len() != 2 || log_probs.shape()[1] < 2 {
            return Err(Error::shape("PosteriorLattice", log_probs.shape(), &[0, 2]));
        }
        for t in 0..log_probs.rows() {
            let z = logsumexp(log_probs.row(t));
            if !z.is_finite() || z.abs() > 1e-5 {
                return Err(Error::Data(format!(
                    "lattice row {t} is not normalized (logsumexp {z})"
                )));
            }
        }
        Ok(Self {
            log_probs,
            frame_duration: FRAME_DURATION_S,
        })
    }

    /// Builds a lattice from probability rows, taking logs.
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        Self::new(probs.map(f64::ln))
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn num_frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn blank(&self) -> usize {
        self.vocab_size() - 1
    }
}

/// Token ids, never containing blank.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Number of adjacent equal pairs; each forces an extra blank frame.
pub fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], vocab: usize, frames: usize) -> Result<()> {
    let blank = vocab - 1;
    if let Some(&bad) = target.iter().find(|&&id| id >= blank) {
        return Err(Error::Data(format!(
            "target id {bad} is blank or out of range for vocabulary {vocab}"
        )));
    }
    let reps = repeats(target);
    if frames < target.len() + reps {
        return Err(Error::TargetTooLong {
            target: target.len(),
            repeats: reps,
            frames,
        });
    }
    Ok(())
}

/// `-log P(target | lattice)` and its gradient with respect to the lattice
/// log-probabilities, by the log-space forward-backward recursion over the
/// blank-interleaved label sequence.
pub fn ctc_loss(lattice: &PosteriorLattice, target: &[usize]) -> Result<(f64, Tensor)> {
    ctc_loss_raw(lattice.log_probs(), target)
}

/// As [`ctc_loss`] but over an arbitrary `[T, V]` log-score matrix (rows need
/// not normalize), which is what the training graph feeds in.
pub fn ctc_loss_raw(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    check_target(target, v, t_len)?;
    let blank = v - 1;
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && target[s / 2] != target[s / 2 - 1];
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    let neg = f64::NEG_INFINITY;

    // alpha[t][s] includes the emission at t; beta[t][s] excludes it.
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = logsumexp2(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = logsumexp2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == neg { neg } else { a + lp(t, label(s)) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        logsumexp2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite("ctc_loss"));
    }

    let mut beta = vec![neg; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, label(s));
            if s + 1 < s_len {
                b = logsumexp2(b, beta[next + s + 1] + lp(t + 1, label(s + 1)));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = logsumexp2(b, beta[next + s + 2] + lp(t + 1, label(s + 2)));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > neg {
                grad[t * v + label(s)] -= occ.exp();
            }
        }
    }
    Ok((-log_p, Tensor::new(vec![t_len, v], grad)?))
}

/// Records the CTC loss of `log_probs [T, V]` on the graph.
pub fn ctc_loss_var(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    let (loss, grad) = ctc_loss_raw(g.value(log_probs), target)?;
    g.external_scalar(log_probs, loss, grad)
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Upper bound on `V^T` for [`brute_force_ctc`].
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// `P(target | lattice)` by summing over every length-`T` label path.
pub fn brute_force_ctc(lattice: &PosteriorLattice, target: &[usize]) -> Result<f64> {
    let (t_len, v) = (lattice.num_frames(), lattice.vocab_size());
    let size = (v as f64).powi(t_len as i32);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(size));
    }
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path, lattice.blank()) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| lattice.log_probs().row(t)[k])
                .sum::<f64>()
                .exp();
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax (first index on ties), collapse repeats, drop blanks.
pub fn greedy_decode(lattice: &PosteriorLattice) -> TokenSequence {
    let path: Vec<usize> = (0..lattice.num_frames())
        .map(|t| {
            let row = lattice.log_probs().row(t);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    TokenSequence::new(collapse(&path, lattice.blank()))
}

pub const BLANK_TOKEN: &str = "<blank>";
pub const SPACE_TOKEN: &str = "<space>";

/// Token inventory; the last entry is always `<blank>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens.last().map(String::as_str) != Some(BLANK_TOKEN) {
            return Err(Error::Data(format!("vocabulary must end with {BLANK_TOKEN}")));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if t.is_empty() || !seen.insert(t) {
                return Err(Error::Data(format!("empty or duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens })
    }

    /// 32 entries: space, a-z, apostrophe, hyphen, period, question mark, blank.
    pub fn characters() -> Self {
        let mut tokens = vec![SPACE_TOKEN.to_string()];
        tokens.extend(('a'..='z').map(String::from));
        tokens.extend(["'", "-", ".", "?"].map(String::from));
        tokens.push(BLANK_TOKEN.to_string());
        Self { tokens }
    }

    /// Character vocabulary restricted to `chars` plus space and blank.
    pub fn from_chars(chars: &str) -> Result<Self> {
        let mut tokens = vec![SPACE_TOKEN.to_string()];
        for c in chars.chars() {
            let s = c.to_string();
            if !tokens.contains(&s) {
                tokens.push(s);
            }
        }
        tokens.push(BLANK_TOKEN.to_string());
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens[..self.blank()].iter().position(|t| t == token)
    }

    fn surface(&self, id: usize) -> &str {
        match self.tokens[id].as_str() {
            SPACE_TOKEN => " ",
            t => t,
        }
    }

    /// Greedy longest-match tokenization; runs of whitespace become one space token.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        let mut ids = Vec::new();
        let mut rest = text.as_str();
        while !rest.is_empty() {
            let best = (0..self.blank())
                .filter(|&id| rest.starts_with(self.surface(id)))
                .max_by_key(|&id| (self.surface(id).len(), std::cmp::Reverse(id)))
                .ok_or_else(|| Error::UnknownSymbol(rest.chars().next().unwrap_or(' ').to_string()))?;
            ids.push(best);
            rest = &rest[self.surface(best).len()..];
        }
        Ok(TokenSequence::new(ids))
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        let s: String = seq.ids.iter().map(|&id| self.surface(id)).collect();
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::new(tokens).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, v: usize) -> PosteriorLattice {
        PosteriorLattice::new(Tensor::full(&[t, v], -(v as f64).ln())).unwrap()
    }

    #[test]
    fn uniform_two_frames_single_label() {
        // Paths collapsing to "a" over (a, b, blank): aa, a_, _a.
        let (loss, _) = ctc_loss(&uniform(2, 3), &[0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_alignment_has_zero_loss() {
        let path = [0, 2, 0, 1, 1];
        let mut lp = Tensor::full(&[5, 3], -1e3);
        for (t, &k) in path.iter().enumerate() {
            lp.row_mut(t)[k] = 0.0;
        }
        let lat = PosteriorLattice::new(lp).unwrap();
        let (loss, _) = ctc_loss(&lat, &[0, 0, 1]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert_eq!(greedy_decode(&lat).ids, vec![0, 0, 1]);
    }

    #[test]
    fn empty_target_single_frame() {
        let probs = Tensor::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
        let lat = PosteriorLattice::from_probs(&probs).unwrap();
        assert!((brute_force_ctc(&lat, &[]).unwrap() - 0.5).abs() < 1e-15);
        let (loss, _) = ctc_loss(&lat, &[]).unwrap();
        assert!((loss + 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let err = ctc_loss(&uniform(2, 3), &[0, 0]).unwrap_err();
        assert!(err.to_string().contains("target too long"));
        assert!(ctc_loss(&uniform(2, 3), &[0, 1]).is_ok());
        assert!(ctc_loss(&uniform(3, 3), &[2]).is_err());
    }

    #[test]
    fn brute_force_refuses_huge_instances() {
        assert!(matches!(
            brute_force_ctc(&uniform(20, 4), &[0]),
            Err(Error::InstanceTooLarge(_))
        ));
    }

    #[test]
    fn greedy_collapse_rule() {
        // blank = 2; argmax path [a, a, blank, a, b].
        let path = [0, 0, 2, 0, 1];
        let mut lp = Tensor::full(&[5, 3], (0.1f64).ln());
        for (t, &k) in path.iter().enumerate() {
            lp.row_mut(t)[k] = (0.8f64).ln();
        }
        let lat = PosteriorLattice::new(lp).unwrap();
        assert_eq!(greedy_decode(&lat).ids, vec![0, 0, 1]);
        let mut blank = Tensor::full(&[4, 3], (0.1f64).ln());
        (0..4).for_each(|t| blank.row_mut(t)[2] = (0.8f64).ln());
        assert!(greedy_decode(&PosteriorLattice::new(blank).unwrap()).is_empty());
    }

    #[test]
    fn vocabulary_round_trip() {
        let vocab = Vocabulary::characters();
        assert_eq!(vocab.len(), 32);
        assert_eq!(vocab.blank(), 31);
        let seq = vocab.encode("don't  stop").unwrap();
        assert_eq!(vocab.decode(&seq), "don't stop");
        assert!(vocab.encode("x!").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
        std::fs::write(&path, "a\nb\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    #[test]
    fn longest_match_prefers_multi_char_tokens() {
        let vocab = Vocabulary::new(["<space>", "a", "b", "ab", "<blank>"].map(String::from).to_vec()).unwrap();
        assert_eq!(vocab.encode("aab").unwrap().ids, vec![1, 3]);
    }
}
