//! Exact verification laboratory for the k-sparse trainability statement.
//!
//! For a discrete joint p(x_1..x_n), the statement says: p factors as a
//! product of n conditionals p(x_i | x_{J_i}) with J_i ⊆ {1..i-1},
//! |J_i| <= k-1, if and only if for every i some such J_i satisfies
//! p(x_i | x_{<i}) = p(x_i | x_{J_i}) on all supported histories.
//!
//! Everything here works on explicit probability tables, so both
//! directions can be checked numerically and exhaustively for small n.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-9;

/// Largest variable count accepted by the exhaustive set search.
pub const MAX_SEARCH_VARS: usize = 8;

/// Exact probability table over n small-alphabet variables.
///
/// Assignments are indexed in row-major order with the last variable
/// fastest: index = sum_i x_i * prod_{j>i} alphabet_j.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pub alphabet: Vec<usize>,
    pub probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(alphabet: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::invalid("need at least one variable"));
        }
        if alphabet.iter().any(|&a| a < 2 || a > 4) {
            return Err(Error::invalid(
                "per-variable alphabet sizes must be in 2..=4",
            ));
        }
        let size: usize = alphabet.iter().product();
        if probs.len() != size {
            return Err(Error::invalid(format!(
                "table has {} entries but the alphabets require {size}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::invalid("probabilities must be finite and >= 0"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "probabilities sum to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(DiscreteJoint { alphabet, probs })
    }

    pub fn num_vars(&self) -> usize {
        self.alphabet.len()
    }

    pub fn table_size(&self) -> usize {
        self.probs.len()
    }

    pub fn index_of(&self, assignment: &[usize]) -> usize {
        debug_assert_eq!(assignment.len(), self.num_vars());
        let mut idx = 0;
        for (x, a) in assignment.iter().zip(&self.alphabet) {
            debug_assert!(x < a);
            idx = idx * a + x;
        }
        idx
    }

    pub fn assignment_of(&self, mut idx: usize) -> Vec<usize> {
        let n = self.num_vars();
        let mut out = vec![0usize; n];
        for i in (0..n).rev() {
            out[i] = idx % self.alphabet[i];
            idx /= self.alphabet[i];
        }
        out
    }

    pub fn prob(&self, assignment: &[usize]) -> f64 {
        self.probs[self.index_of(assignment)]
    }

    /// Marginal over the variable set I (0-based indices, any order; the
    /// result keeps increasing index order).
    pub fn marginal(&self, indices: &[usize]) -> Result<DiscreteJoint> {
        if indices.is_empty() {
            return Err(Error::invalid("marginal over an empty index set"));
        }
        let n = self.num_vars();
        let mut idx: Vec<usize> = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if idx.len() != indices.len() {
            return Err(Error::invalid("duplicate indices in marginal set"));
        }
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::invalid(format!(
                "marginal index out of range (n = {n})"
            )));
        }
        let alphabet: Vec<usize> = idx.iter().map(|&i| self.alphabet[i]).collect();
        let size: usize = alphabet.iter().product();
        let mut probs = vec![0.0; size];
        for full_idx in 0..self.table_size() {
            let assignment = self.assignment_of(full_idx);
            let mut sub = 0usize;
            for (pos, &i) in idx.iter().enumerate() {
                sub = sub * alphabet[pos] + assignment[i];
            }
            probs[sub] += self.probs[full_idx];
        }
        // sums to 1 by construction; renormalization would hide bugs
        DiscreteJoint::new(alphabet, probs)
    }

    /// Total-variation distance 0.5 * sum |p - q|.
    pub fn tv_distance(&self, other: &DiscreteJoint) -> f64 {
        assert_eq!(self.alphabet, other.alphabet);
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Conditional table p(x_i | x_I): one row per assignment of the
/// conditioning set, `None` where that assignment has zero probability.
#[derive(Debug, Clone)]
pub struct ConditionalTable {
    pub target: usize,
    pub given: Vec<usize>,
    pub target_alphabet: usize,
    pub given_alphabet: Vec<usize>,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl ConditionalTable {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row_index(&self, given_assignment: &[usize]) -> usize {
        let mut idx = 0;
        for (x, a) in given_assignment.iter().zip(&self.given_alphabet) {
            idx = idx * a + x;
        }
        idx
    }
}

/// p(x_i | x_I) = p(x_i, x_I) / p(x_I); rows with p(x_I) = 0 are flagged
/// unsupported rather than treated as errors.
pub fn conditional(p: &DiscreteJoint, target: usize, given: &[usize]) -> Result<ConditionalTable> {
    if given.contains(&target) {
        return Err(Error::invalid(format!(
            "target {target} cannot appear in its own conditioning set"
        )));
    }
    let mut sorted: Vec<usize> = given.to_vec();
    sorted.sort_unstable();
    let target_alphabet = p.alphabet[target];
    let given_alphabet: Vec<usize> = sorted.iter().map(|&i| p.alphabet[i]).collect();
    let num_rows: usize = given_alphabet.iter().product::<usize>().max(1);

    // joint over {target} ∪ given and marginal over given
    let mut scope: Vec<usize> = sorted.clone();
    scope.push(target);
    scope.sort_unstable();
    let joint = p.marginal(&scope)?;
    let target_pos = scope.iter().position(|&i| i == target).unwrap();

    let mut rows: Vec<Option<Vec<f64>>> = vec![None; num_rows];
    let mut numer = vec![vec![0.0; target_alphabet]; num_rows];
    let mut denom = vec![0.0; num_rows];
    for idx in 0..joint.table_size() {
        let a = joint.assignment_of(idx);
        let x_t = a[target_pos];
        let mut row = 0usize;
        for (pos, &orig) in sorted.iter().enumerate() {
            let p_in_scope = scope.iter().position(|&s| s == orig).unwrap();
            row = row * given_alphabet[pos] + a[p_in_scope];
        }
        numer[row][x_t] += joint.probs[idx];
        denom[row] += joint.probs[idx];
    }
    for r in 0..num_rows {
        if denom[r] > 0.0 {
            rows[r] = Some(numer[r].iter().map(|v| v / denom[r]).collect());
        }
    }
    Ok(ConditionalTable {
        target,
        given: sorted,
        target_alphabet,
        given_alphabet,
        rows,
    })
}

/// Explaining sets J_i (0-based target indices; J_i ⊆ {0..i-1}).
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainingSets {
    pub sets: Vec<Vec<usize>>,
}

/// Subsets of 0..i with at most `max_size` elements, smallest cardinality
/// first, lexicographic within a cardinality.
fn candidate_sets(i: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_size {
        let mut next = Vec::new();
        for base in &frontier {
            let start = base.last().map(|&x| x + 1).unwrap_or(0);
            for j in start..i {
                let mut s = base.clone();
                s.push(j);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Does p(x_i | x_{<i}) equal p(x_i | x_J) on every supported history?
fn set_explains(p: &DiscreteJoint, i: usize, j_set: &[usize], tol: f64) -> bool {
    let full_history: Vec<usize> = (0..i).collect();
    if full_history.is_empty() {
        return true; // p(x_0 | nothing) = p(x_0) trivially
    }
    let cond_full = conditional(p, i, &full_history).expect("valid history set");
    let cond_j = conditional(p, i, j_set).expect("valid candidate set");
    for row in 0..cond_full.num_rows() {
        let Some(full_dist) = &cond_full.rows[row] else {
            continue; // unsupported history: equality only required on support
        };
        // project the history assignment onto J
        let history = decode_assignment(row, &cond_full.given_alphabet);
        let j_assignment: Vec<usize> = cond_j
            .given
            .iter()
            .map(|&orig| {
                let pos = cond_full.given.iter().position(|&g| g == orig).unwrap();
                history[pos]
            })
            .collect();
        let j_row = cond_j.row_index(&j_assignment);
        let Some(j_dist) = &cond_j.rows[j_row] else {
            return false; // supported history but unsupported projection
        };
        for (a, b) in full_dist.iter().zip(j_dist) {
            if (a - b).abs() > tol {
                return false;
            }
        }
    }
    true
}

fn decode_assignment(mut idx: usize, alphabet: &[usize]) -> Vec<usize> {
    let n = alphabet.len();
    let mut out = vec![0usize; n];
    for i in (0..n).rev() {
        out[i] = idx % alphabet[i];
        idx /= alphabet[i];
    }
    out
}

/// Exhaustively search, for each variable, the smallest previous-index set
/// (|J_i| <= k-1) whose conditional matches the full-history conditional.
pub fn find_explaining_sets(
    p: &DiscreteJoint,
    k: usize,
    tol: f64,
) -> Result<Option<ExplainingSets>> {
    if k < 1 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if p.num_vars() > MAX_SEARCH_VARS {
        return Err(Error::invalid(format!(
            "exhaustive search supports at most {MAX_SEARCH_VARS} variables, got {}",
            p.num_vars()
        )));
    }
    let mut sets = Vec::with_capacity(p.num_vars());
    for i in 0..p.num_vars() {
        let mut found = None;
        for cand in candidate_sets(i, k - 1) {
            if set_explains(p, i, &cand, tol) {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(s) => sets.push(s),
            None => return Ok(None),
        }
    }
    Ok(Some(ExplainingSets { sets }))
}

/// Product of conditionals prod_i p(x_i | x_{J_i}); assignments whose
/// conditioning row is unsupported contribute probability 0.
pub fn reconstruct_joint(p: &DiscreteJoint, sets: &ExplainingSets) -> Result<DiscreteJoint> {
    let n = p.num_vars();
    if sets.sets.len() != n {
        return Err(Error::invalid(format!(
            "expected {n} explaining sets, got {}",
            sets.sets.len()
        )));
    }
    for (i, s) in sets.sets.iter().enumerate() {
        if s.iter().any(|&j| j >= i) {
            return Err(Error::invalid(format!(
                "set for variable {i} contains a non-previous index"
            )));
        }
    }
    let conditionals: Vec<ConditionalTable> = (0..n)
        .map(|i| conditional(p, i, &sets.sets[i]))
        .collect::<Result<Vec<_>>>()?;

    let mut probs = vec![0.0; p.table_size()];
    for idx in 0..p.table_size() {
        let a = p.assignment_of(idx);
        let mut prob = 1.0;
        for (i, cond) in conditionals.iter().enumerate() {
            let given: Vec<usize> = cond.given.iter().map(|&j| a[j]).collect();
            let row = cond.row_index(&given);
            match &cond.rows[row] {
                Some(dist) => prob *= dist[a[i]],
                None => {
                    prob = 0.0;
                    break;
                }
            }
        }
        probs[idx] = prob;
    }
    // the product may be sub-normalized when sets are wrong; report as-is
    let alphabet = p.alphabet.clone();
    Ok(DiscreteJoint { alphabet, probs })
}

/// Per-variable and per-prefix deviations of the reverse-direction proof
/// obligations.
#[derive(Debug, Clone)]
pub struct ReverseReport {
    /// max_i |p(x_i | x_{<i}) - p(x_i | x_{J_i})| over supported rows.
    pub per_var_deviation: Vec<f64>,
    /// max over assignments of |p(x_{<=m}) - prod_{i<=m} p(x_i | x_{J_i})|.
    pub per_prefix_deviation: Vec<f64>,
    pub max_deviation: f64,
}

/// Check the reverse direction: given sets whose conditional product
/// reconstructs p, every prefix marginal must equal the partial product,
/// and every full-history conditional must equal the J_i conditional.
pub fn verify_reverse_direction(
    p: &DiscreteJoint,
    sets: &ExplainingSets,
    tol: f64,
) -> Result<ReverseReport> {
    let recon = reconstruct_joint(p, sets)?;
    let tv = p.tv_distance(&recon);
    if tv > tol {
        return Err(Error::invalid(format!(
            "precondition failed: reconstruction TV distance {tv} exceeds {tol}"
        )));
    }
    let n = p.num_vars();
    let conditionals: Vec<ConditionalTable> = (0..n)
        .map(|i| conditional(p, i, &sets.sets[i]))
        .collect::<Result<Vec<_>>>()?;

    // prefix lemma: p(x_{<=m}) = prod_{i<=m} p(x_i | x_{J_i})
    let mut per_prefix = Vec::with_capacity(n);
    for m in 0..n {
        let scope: Vec<usize> = (0..=m).collect();
        let prefix = p.marginal(&scope)?;
        let mut max_dev: f64 = 0.0;
        for idx in 0..prefix.table_size() {
            let a = prefix.assignment_of(idx);
            let mut prod = 1.0;
            for (i, cond) in conditionals.iter().take(m + 1).enumerate() {
                let given: Vec<usize> = cond.given.iter().map(|&j| a[j]).collect();
                let row = cond.row_index(&given);
                match &cond.rows[row] {
                    Some(dist) => prod *= dist[a[i]],
                    None => {
                        prod = 0.0;
                        break;
                    }
                }
            }
            max_dev = max_dev.max((prefix.probs[idx] - prod).abs());
        }
        per_prefix.push(max_dev);
    }

    // short-history equalities
    let mut per_var = Vec::with_capacity(n);
    for i in 0..n {
        let full: Vec<usize> = (0..i).collect();
        if full.is_empty() {
            per_var.push(0.0);
            continue;
        }
        let cond_full = conditional(p, i, &full)?;
        let cond_j = &conditionals[i];
        let mut max_dev: f64 = 0.0;
        for row in 0..cond_full.num_rows() {
            let Some(full_dist) = &cond_full.rows[row] else {
                continue;
            };
            let history = decode_assignment(row, &cond_full.given_alphabet);
            let given: Vec<usize> = cond_j
                .given
                .iter()
                .map(|&orig| {
                    let pos = cond_full.given.iter().position(|&g| g == orig).unwrap();
                    history[pos]
                })
                .collect();
            let j_row = cond_j.row_index(&given);
            if let Some(j_dist) = &cond_j.rows[j_row] {
                for (a, b) in full_dist.iter().zip(j_dist) {
                    max_dev = max_dev.max((a - b).abs());
                }
            } else {
                max_dev = f64::INFINITY;
            }
        }
        per_var.push(max_dev);
    }

    let max_deviation = per_var
        .iter()
        .chain(per_prefix.iter())
        .fold(0.0f64, |m, d| m.max(*d));
    Ok(ReverseReport {
        per_var_deviation: per_var,
        per_prefix_deviation: per_prefix,
        max_deviation,
    })
}

// ---- builtin distributions -------------------------------------------------

/// Binary Markov chain of length n: p(x_0) = (0.6, 0.4), transitions
/// q(same) = 0.8.
pub fn builtin_markov(n: usize) -> DiscreteJoint {
    assert!(n >= 2);
    let alphabet = vec![2usize; n];
    let size = 1usize << n;
    let mut probs = vec![0.0; size];
    for idx in 0..size {
        let bits: Vec<usize> = (0..n).map(|i| (idx >> (n - 1 - i)) & 1).collect();
        let mut p = if bits[0] == 0 { 0.6 } else { 0.4 };
        for w in bits.windows(2) {
            p *= if w[0] == w[1] { 0.8 } else { 0.2 };
        }
        probs[idx] = p;
    }
    DiscreteJoint::new(alphabet, probs).unwrap()
}

/// x_0, x_1 uniform bits; x_2 = x_0 XOR x_1.
pub fn builtin_parity() -> DiscreteJoint {
    let alphabet = vec![2usize; 3];
    let mut probs = vec![0.0; 8];
    for x0 in 0..2usize {
        for x1 in 0..2usize {
            let x2 = x0 ^ x1;
            probs[(x0 * 2 + x1) * 2 + x2] = 0.25;
        }
    }
    DiscreteJoint::new(alphabet, probs).unwrap()
}

/// Random positive joint over n binary variables.
pub fn builtin_random(n: usize, seed: u64) -> DiscreteJoint {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed);
    let size = 1usize << n;
    let mut probs: Vec<f64> = (0..size).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    // counteract accumulated rounding so the constructor's 1e-12 check holds
    let sum: f64 = probs.iter().sum();
    probs[0] += 1.0 - sum;
    DiscreteJoint::new(vec![2; n], probs).unwrap()
}

// ---- text format -----------------------------------------------------------

/// Parse the joint-table text format:
///
/// ```text
/// # comments allowed
/// n=3
/// alphabet=2 2 2
/// 0 0 0 0.125
/// 0 0 1 0.125
/// ...
/// ```
///
/// Unlisted assignments default to probability 0.
pub fn parse_joint(text: &str) -> Result<DiscreteJoint> {
    let mut n: Option<usize> = None;
    let mut alphabet: Option<Vec<usize>> = None;
    let mut entries: Vec<(Vec<usize>, f64)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::invalid(format!("line {}: {msg}", lineno + 1));
        if let Some(v) = line.strip_prefix("n=") {
            n = Some(
                v.trim()
                    .parse()
                    .map_err(|_| err(format!("bad variable count `{v}`")))?,
            );
        } else if let Some(v) = line.strip_prefix("alphabet=") {
            let sizes = v
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err(format!("bad alphabet line `{v}`")))?;
            alphabet = Some(sizes);
        } else {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let n = n.ok_or_else(|| err("n= must appear before data lines".to_string()))?;
            if toks.len() != n + 1 {
                return Err(err(format!(
                    "expected {n} assignment values and one probability, got {} tokens",
                    toks.len()
                )));
            }
            let assignment = toks[..n]
                .iter()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err("bad assignment value".to_string()))?;
            let prob = toks[n]
                .parse::<f64>()
                .map_err(|_| err(format!("bad probability `{}`", toks[n])))?;
            entries.push((assignment, prob));
        }
    }
    let n = n.ok_or_else(|| Error::invalid("missing n= header"))?;
    let alphabet = alphabet.ok_or_else(|| Error::invalid("missing alphabet= header"))?;
    if alphabet.len() != n {
        return Err(Error::invalid(format!(
            "alphabet lists {} sizes but n={n}",
            alphabet.len()
        )));
    }
    let size: usize = alphabet.iter().product();
    let mut probs = vec![0.0; size];
    let skeleton = DiscreteJoint {
        alphabet: alphabet.clone(),
        probs: vec![0.0; size],
    };
    for (assignment, prob) in entries {
        if assignment
            .iter()
            .zip(&alphabet)
            .any(|(x, a)| x >= a)
        {
            return Err(Error::invalid(format!(
                "assignment {assignment:?} exceeds the alphabet"
            )));
        }
        probs[skeleton.index_of(&assignment)] = prob;
    }
    DiscreteJoint::new(alphabet, probs)
}

pub fn load_joint(path: &Path) -> Result<DiscreteJoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    parse_joint(&text)
}

/// Human-readable report of a full check run, plus a CSV twin.
pub struct CheckReport {
    pub k: usize,
    pub found: Option<ExplainingSets>,
    pub reconstruction_tv: Option<f64>,
    pub reverse: Option<ReverseReport>,
}

pub fn run_check(p: &DiscreteJoint, k: usize, tol: f64) -> Result<CheckReport> {
    let found = find_explaining_sets(p, k, tol)?;
    let (reconstruction_tv, reverse) = match &found {
        Some(sets) => {
            let recon = reconstruct_joint(p, sets)?;
            let tv = p.tv_distance(&recon);
            let reverse = verify_reverse_direction(p, sets, tol.max(tv * 2.0).max(tol))?;
            (Some(tv), Some(reverse))
        }
        None => (None, None),
    };
    Ok(CheckReport {
        k,
        found,
        reconstruction_tv,
        reverse,
    })
}

impl CheckReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k = {}", self.k);
        match &self.found {
            None => {
                let _ = writeln!(
                    s,
                    "no explaining sets of size <= {} exist: the joint does not factor \
                     into length-{} marginals",
                    self.k - 1,
                    self.k
                );
            }
            Some(sets) => {
                let _ = writeln!(s, "explaining sets found (1-based variable indices):");
                for (i, j) in sets.sets.iter().enumerate() {
                    let pretty: Vec<String> = j.iter().map(|x| (x + 1).to_string()).collect();
                    let _ = writeln!(s, "  J_{} = {{{}}}", i + 1, pretty.join(", "));
                }
                if let Some(tv) = self.reconstruction_tv {
                    let _ = writeln!(s, "reconstruction TV distance = {tv:.3e}");
                }
                if let Some(rev) = &self.reverse {
                    let _ = writeln!(
                        s,
                        "reverse-direction max deviation = {:.3e}",
                        rev.max_deviation
                    );
                }
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable,explaining_set,var_deviation,prefix_deviation\n");
        if let (Some(sets), Some(rev)) = (&self.found, &self.reverse) {
            for i in 0..sets.sets.len() {
                let pretty: Vec<String> =
                    sets.sets[i].iter().map(|x| (x + 1).to_string()).collect();
                let _ = writeln!(
                    s,
                    "{},{},{:e},{:e}",
                    i + 1,
                    pretty.join(" "),
                    rev.per_var_deviation[i],
                    rev.per_prefix_deviation[i]
                );
            }
        }
        s
    }
}
