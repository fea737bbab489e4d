/// One evaluation of a scalar function under test.
///
/// `branch` fingerprints every piecewise decision taken (ReLU signs, max
/// indices, median pairs). A finite-difference probe whose `+ε` or `-ε`
/// evaluation lands on a different branch straddles a kink and is skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub branch: u64,
}

impl From<f64> for Evaluation {
    fn from(value: f64) -> Self {
        Evaluation { value, branch: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Compare `analytic` against central differences of `f` at `x`.
///
/// `coords` restricts the check to a subset of coordinates; `None` checks
/// all of them.
pub fn grad_check<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> Evaluation,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let base = f(x).branch;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.to_vec();
    let mut report = GradCheckReport::default();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if plus.branch != base || minus.branch != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}

/// FNV-1a style fold used to fingerprint branch decisions.
pub(crate) fn fold_bits(mut h: u64, bits: impl IntoIterator<Item = bool>) -> u64 {
    for b in bits {
        h ^= b as u64 + 1;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn fold_index(mut h: u64, idx: impl IntoIterator<Item = usize>) -> u64 {
    for i in idx {
        h ^= i as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) const BRANCH_SEED: u64 = 0xcbf29ce484222325;
