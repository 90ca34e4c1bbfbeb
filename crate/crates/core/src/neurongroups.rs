//! Disjoint groups of GRU hidden neurons by complete-linkage clustering on
//! negative activation correlation over corpus n-grams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenCorpus, WindowRef};
use crate::error::{Error, Result};
use crate::imaginet::{Layer, ModelWeights, NeuronTarget, Path};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const PROFILE_BATCH: usize = 256;

/// Final hidden states of sampled windows, one row per window.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationProfile {
    pub path: Path,
    pub windows: Vec<WindowRef>,
    pub matrix: Matrix<f64>,
}

impl ActivationProfile {
    /// Columns whose entries are all identical.
    pub fn constant_columns(&self) -> Vec<usize> {
        constant_columns(&self.matrix)
    }
}

fn constant_columns(a: &Matrix<f64>) -> Vec<usize> {
    (0..a.cols())
        .filter(|&j| (1..a.rows()).all(|i| a.get(i, j) == a.get(0, j)))
        .collect()
}

/// Samples up to `sample_limit` valid windows uniformly without replacement and
/// records the final hidden state of `path` for each. Sampled windows keep corpus
/// order; when the limit covers every window the seed is irrelevant.
pub fn profile<T: Scalar>(
    corpus: &TokenCorpus,
    path: Path,
    weights: &ModelWeights<T>,
    t: usize,
    sample_limit: usize,
    seed: u64,
) -> Result<ActivationProfile> {
    if sample_limit < 2 {
        return Err(Error::InvalidArgument(format!("sample_limit must be at least 2, got {sample_limit}")));
    }
    corpus.check_vocab(weights.dims().vocab)?;
    let all = corpus.windows(t);
    if all.len() < 2 {
        return Err(Error::Corpus(format!("need at least 2 valid {t}-token windows, found {}", all.len())));
    }
    let windows: Vec<WindowRef> = if sample_limit >= all.len() {
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, all.len(), sample_limit).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| all[i]).collect()
    };
    let h = weights.dims().hidden;
    let blocks: Vec<Vec<f64>> = windows
        .par_chunks(PROFILE_BATCH)
        .map(|chunk| {
            let toks: Vec<&[usize]> = chunk.iter().map(|&w| corpus.window(w, t)).collect();
            let (hidden, _) = weights.final_outputs(&toks, path)?;
            Ok(hidden.data().iter().map(|v| v.as_f64()).collect())
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = blocks.into_iter().flatten().collect();
    let matrix = Matrix::from_vec(windows.len(), h, data)?;
    Ok(ActivationProfile { path, windows, matrix })
}

/// `D_ij = -pearson(A[:, i], A[:, j])` with `D_ii = -1`, computed in two passes
/// (means, then centered products).
pub fn correlation_distance(a: &Matrix<f64>) -> Result<Matrix<f64>> {
    let constant = constant_columns(a);
    if !constant.is_empty() {
        return Err(Error::Degenerate(format!("constant activation columns {constant:?}")));
    }
    let (n, m) = a.shape();
    let means: Vec<f64> = (0..m).map(|j| (0..n).map(|i| a.get(i, j)).sum::<f64>() / n as f64).collect();
    let centered = Matrix::from_vec(n, m, (0..n * m).map(|k| a.data()[k] - means[k % m]).collect())?;
    let ss: Vec<f64> = (0..m).map(|j| (0..n).map(|i| centered.get(i, j).powi(2)).sum()).collect();
    if let Some(j) = ss.iter().position(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!("constant activation columns [{j}]")));
    }
    let mut d = Matrix::filled(m, m, -1.0);
    for i in 0..m {
        for j in i + 1..m {
            let cov: f64 = (0..n).map(|r| centered.get(r, i) * centered.get(r, j)).sum();
            let r = (cov / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0);
            d.set(i, j, -r);
            d.set(j, i, -r);
        }
    }
    Ok(d)
}

/// One agglomeration step. Clusters are named by their smallest member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// Groups over the indices of the clustered matrix, each sorted, ordered by
/// smallest member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub groups: Vec<Vec<usize>>,
    pub trace: Vec<Merge>,
}

/// Complete-linkage agglomeration down to `k` clusters. Each step merges the pair
/// with the smallest linkage; ties go to the pair whose (smaller, larger) cluster
/// names are lexicographically least.
pub fn cluster(d: &Matrix<f64>, k: usize) -> Result<Clustering> {
    let n = d.rows();
    if d.cols() != n {
        return Err(Error::shape("cluster", d.shape_string(), "square matrix"));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("group count {k} outside 1..={n}")));
    }
    if !d.is_finite() {
        return Err(Error::NonFinite("distance matrix".into()));
    }
    // Slots stay at their original index; a merged cluster lives in the slot of its
    // smallest member, which is also its name.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut link = d.clone();
    let mut trace = Vec::with_capacity(n - k);
    for _ in 0..n - k {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if members[a].is_none() {
                continue;
            }
            for b in a + 1..n {
                if members[b].is_none() {
                    continue;
                }
                let h = link.get(a, b);
                if best.is_none_or(|(bh, _, _)| h < bh) {
                    best = Some((h, a, b));
                }
            }
        }
        let (height, a, b) = best.expect("more than k clusters remain");
        let moved = members[b].take().expect("live cluster");
        let merged = members[a].as_mut().expect("live cluster");
        merged.extend(moved);
        merged.sort_unstable();
        let size = merged.len();
        for c in 0..n {
            if c != a && members[c].is_some() {
                let v = link.get(a, c).max(link.get(b, c));
                link.set(a, c, v);
                link.set(c, a, v);
            }
        }
        trace.push(Merge { left: a, right: b, height, size });
    }
    Ok(Clustering { groups: members.into_iter().flatten().collect(), trace })
}

/// Grouping of a path's hidden neurons, in original neuron indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronGrouping {
    pub path: Path,
    pub groups: Vec<Vec<usize>>,
    /// Constant-activation neurons left out of clustering.
    pub degenerate: Vec<usize>,
    pub trace: Vec<Merge>,
    pub samples: usize,
}

impl NeuronGrouping {
    /// One mean-aggregated hidden-layer target per group.
    pub fn targets(&self) -> Vec<NeuronTarget> {
        self.groups
            .iter()
            .map(|g| NeuronTarget::group(self.path, Layer::Hidden, g.clone()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Arbitrary default of one group per eight neurons, at least one.
pub fn default_group_count(n: usize) -> usize {
    (n / 8).max(1)
}

/// Clusters the non-constant columns of a profile into `k` groups.
pub fn group_neurons(profile: &ActivationProfile, k: usize) -> Result<NeuronGrouping> {
    let degenerate = profile.constant_columns();
    let kept: Vec<usize> = (0..profile.matrix.cols()).filter(|j| !degenerate.contains(j)).collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("every hidden neuron has constant activation".into()));
    }
    if k == 0 || k > kept.len() {
        return Err(Error::InvalidArgument(format!(
            "group count {k} outside 1..={} non-constant neurons",
            kept.len()
        )));
    }
    let n = profile.matrix.rows();
    let sub = Matrix::from_vec(
        n,
        kept.len(),
        (0..n).flat_map(|i| kept.iter().map(move |&j| (i, j))).map(|(i, j)| profile.matrix.get(i, j)).collect(),
    )?;
    let c = cluster(&correlation_distance(&sub)?, k)?;
    let relabel = |i: usize| kept[i];
    Ok(NeuronGrouping {
        path: profile.path,
        groups: c.groups.iter().map(|g| g.iter().map(|&i| relabel(i)).collect()).collect(),
        degenerate,
        trace: c
            .trace
            .iter()
            .map(|m| Merge { left: relabel(m.left), right: relabel(m.right), ..m.clone() })
            .collect(),
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaginet::ModelDims;

    #[test]
    fn identical_and_opposite_columns() {
        let a = Matrix::from_vec(3, 3, vec![1.0, -1.0, 1.0, 2.0, -2.0, 2.0, 4.0, -4.0, 4.0]).unwrap();
        let d = correlation_distance(&a).unwrap();
        assert_eq!(d.get(0, 2), -1.0);
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(1, 1), -1.0);
    }

    #[test]
    fn constant_column_is_named() {
        let a = Matrix::from_vec(3, 2, vec![0.1, 1.0, 0.1, 2.0, 0.1, 3.0]).unwrap();
        let err = correlation_distance(&a).unwrap_err();
        assert!(err.to_string().contains("[0]"), "{err}");
    }

    #[test]
    fn singletons_when_k_is_n() {
        let d = Matrix::from_vec(3, 3, vec![-1.0, 0.2, 0.3, 0.2, -1.0, 0.1, 0.3, 0.1, -1.0]).unwrap();
        let c = cluster(&d, 3).unwrap();
        assert_eq!(c.groups, vec![vec![0], vec![1], vec![2]]);
        assert!(c.trace.is_empty());
        assert!(cluster(&d, 0).is_err());
        assert!(cluster(&d, 4).is_err());
    }

    #[test]
    fn forced_first_merge() {
        let d = Matrix::from_vec(3, 3, vec![-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0]).unwrap();
        let c = cluster(&d, 2).unwrap();
        assert_eq!(c.groups, vec![vec![0, 1], vec![2]]);
        assert_eq!(c.trace, vec![Merge { left: 0, right: 1, height: -1.0, size: 2 }]);
    }

    #[test]
    fn ties_go_to_smallest_names() {
        let d = Matrix::filled(4, 4, 0.5);
        let c = cluster(&d, 2).unwrap();
        assert_eq!(c.groups, vec![vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn zero_model_profile_is_all_degenerate() {
        let dims = ModelDims { vocab: 5, embed: 3, hidden: 4, visual: 2 };
        let w = ModelWeights::<f64>::zeros(dims);
        let corpus = TokenCorpus::new(vec![vec![1, 2, 3, 4], vec![2, 2, 1]]).unwrap();
        let p = profile(&corpus, Path::Visual, &w, 2, 100, 0).unwrap();
        assert_eq!(p.matrix.rows(), 5);
        assert_eq!(p.constant_columns(), vec![0, 1, 2, 3]);
        assert!(matches!(group_neurons(&p, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn too_few_windows() {
        let dims = ModelDims { vocab: 5, embed: 3, hidden: 4, visual: 2 };
        let w = ModelWeights::<f64>::zeros(dims);
        let corpus = TokenCorpus::new(vec![vec![1, 2]]).unwrap();
        assert!(profile(&corpus, Path::Lang, &w, 2, 10, 0).is_err());
        assert!(profile(&corpus, Path::Lang, &w, 1, 1, 0).is_err());
    }
}
