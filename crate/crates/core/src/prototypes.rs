//! Online prototypes and the pairwise confusion distribution.
//!
//! An online prototype is the l2-normalized per-class mean of the embeddings
//! present in a single mini-batch; nothing is accumulated across steps. The
//! confusion distribution puts a Gaussian kernel over squared distances of
//! prototype pairs: the closer two class prototypes sit, the more probability
//! their pair receives.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, l2_normalize_backward, Tensor2};

/// Per-class unit-norm mean embeddings of one mini-batch, with enough
/// bookkeeping to push loss gradients back onto the contributing rows.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    classes: Vec<usize>,
    prototypes: Tensor2,
    means: Tensor2,
    members: Vec<Vec<usize>>,
}

impl PrototypeSet {
    /// Averages embeddings per class, then re-normalizes each mean. Only
    /// classes present in the batch appear. Rows of `z` must align with
    /// `labels`.
    pub fn compute(z: &Tensor2, labels: &[usize]) -> Result<Self> {
        if z.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embeddings against {} labels",
                z.rows(),
                labels.len()
            )));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &label) in labels.iter().enumerate() {
            by_class.entry(label).or_default().push(row);
        }
        let dim = z.cols();
        let mut classes = Vec::with_capacity(by_class.len());
        let mut members = Vec::with_capacity(by_class.len());
        let mut means = Tensor2::zeros(by_class.len(), dim);
        let mut prototypes = Tensor2::zeros(by_class.len(), dim);
        for (k, (class, rows)) in by_class.into_iter().enumerate() {
            let mean = means.row_mut(k);
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(z.row(r)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= rows.len() as f64;
            }
            let unit = l2_normalize(means.row(k))?;
            prototypes.row_mut(k).copy_from_slice(&unit);
            classes.push(class);
            members.push(rows);
        }
        Ok(Self { classes, prototypes, means, members })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Class ids in ascending order, aligned with prototype rows.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn prototypes(&self) -> &Tensor2 {
        &self.prototypes
    }

    pub fn count(&self, idx: usize) -> usize {
        self.members[idx].len()
    }

    /// Drops the given classes, keeping gradient bookkeeping intact.
    pub fn without_classes(&self, excluded: &BTreeSet<usize>) -> Self {
        let keep: Vec<usize> = (0..self.classes.len())
            .filter(|&k| !excluded.contains(&self.classes[k]))
            .collect();
        let dim = self.prototypes.cols();
        let mut prototypes = Tensor2::zeros(keep.len(), dim);
        let mut means = Tensor2::zeros(keep.len(), dim);
        let mut classes = Vec::with_capacity(keep.len());
        let mut members = Vec::with_capacity(keep.len());
        for (row, &k) in keep.iter().enumerate() {
            prototypes.row_mut(row).copy_from_slice(self.prototypes.row(k));
            means.row_mut(row).copy_from_slice(self.means.row(k));
            classes.push(self.classes[k]);
            members.push(self.members[k].clone());
        }
        Self { classes, prototypes, means, members }
    }

    /// Pushes a gradient w.r.t. the normalized prototypes back through the
    /// normalization and the per-class averaging onto the source embeddings.
    pub fn backprop(&self, d_prototypes: &Tensor2, d_z: &mut Tensor2) -> Result<()> {
        if d_prototypes.rows() != self.classes.len()
            || d_prototypes.cols() != self.prototypes.cols()
        {
            return Err(Error::Shape("prototype gradient shape mismatch".into()));
        }
        for k in 0..self.classes.len() {
            let d_mean = l2_normalize_backward(self.means.row(k), d_prototypes.row(k))?;
            let scale = 1.0 / self.members[k].len() as f64;
            for &row in &self.members[k] {
                for (g, d) in d_z.row_mut(row).iter_mut().zip(&d_mean) {
                    *g += d * scale;
                }
            }
        }
        Ok(())
    }
}

/// Normalized confusion distribution over unordered class pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProbability {
    pub classes: Vec<usize>,
    /// `(class_a, class_b, probability)` with `class_a < class_b`, in
    /// lexicographic pair order. Probabilities sum to one.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl PairProbability {
    /// Pairs sorted by descending probability; ties break on the class pair.
    pub fn by_descending_probability(&self) -> Vec<(usize, usize, f64)> {
        let mut pairs = self.pairs.clone();
        pairs.sort_by(|x, y| {
            y.2.partial_cmp(&x.2).unwrap_or(std::cmp::Ordering::Equal).then(
                (x.0, x.1).cmp(&(y.0, y.1)),
            )
        });
        pairs
    }
}

/// Converts prototype distances into pair probabilities via the kernel
/// `exp(-||p_i - p_j||^2)`, normalized over all unordered pairs.
pub fn pair_probabilities(protos: &PrototypeSet) -> Result<PairProbability> {
    let k = protos.len();
    if k < 2 {
        return Err(Error::InsufficientClasses(k));
    }
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    let mut total = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let d2: f64 = protos
                .prototypes
                .row(i)
                .iter()
                .zip(protos.prototypes.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let w = (-d2).exp();
            total += w;
            pairs.push((protos.classes[i], protos.classes[j], w));
        }
    }
    for p in &mut pairs {
        p.2 /= total;
    }
    Ok(PairProbability { classes: protos.classes.clone(), pairs })
}
