//! Pairwise distances, online batch-hard mining, and the margin /
//! soft-margin triplet losses.

use thiserror::Error;

use crate::backbone::Embedding;

#[derive(Debug, Error)]
pub enum TripletError {
    #[error("need at least 2 embeddings (got {0})")]
    TooFewEmbeddings(usize),
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("cosine distance undefined for zero vector at index {0}")]
    ZeroVectorCosine(usize),
    #[error("anchor {0} has no same-class partner")]
    NoPositive(usize),
    #[error("anchor {0} has no different-class element")]
    NoNegative(usize),
    #[error("labels length {labels} does not match matrix size {size}")]
    LabelCountMismatch { labels: usize, size: usize },
    #[error("hard margin must be positive (got {0})")]
    NonPositiveMargin(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    EuclideanL2,
    Cosine,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::EuclideanL2 => "l2",
            Metric::Cosine => "cosine",
        }
    }
}

/// Symmetric N x N matrix of pairwise distances with an exactly zero
/// diagonal.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    size: usize,
    metric: Metric,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

/// One mined triplet: every batch element serves as an anchor once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedTriplet {
    pub anchor_idx: usize,
    pub positive_idx: usize,
    pub negative_idx: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

/// Margin selection for the triplet objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginSpec {
    HardMargin(f64),
    SoftMargin,
}

impl MarginSpec {
    pub fn hard(m: f64) -> Result<Self, TripletError> {
        if m > 0.0 && m.is_finite() {
            Ok(MarginSpec::HardMargin(m))
        } else {
            Err(TripletError::NonPositiveMargin(m))
        }
    }
}

/// Loss reduction over anchors; the summed form is the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// 1 - cos similarity, clamped into [0, 2] against rounding.
fn cosine_distance(a: &[f64], b: &[f64], norm_a: f64, norm_b: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (norm_a * norm_b)).clamp(0.0, 2.0)
}

/// All pairwise distances. Values are computed once per unordered pair and
/// mirrored, so symmetry is exact.
pub fn pairwise_distances(
    embeddings: &[Embedding],
    metric: Metric,
) -> Result<DistanceMatrix, TripletError> {
    let vectors: Vec<&[f64]> = embeddings.iter().map(|e| e.values.as_slice()).collect();
    pairwise_distances_raw(&vectors, metric)
}

pub(crate) fn pairwise_distances_raw(
    vectors: &[&[f64]],
    metric: Metric,
) -> Result<DistanceMatrix, TripletError> {
    let n = vectors.len();
    if n < 2 {
        return Err(TripletError::TooFewEmbeddings(n));
    }
    let dim = vectors[0].len();
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(TripletError::DimensionMismatch {
                index,
                got: v.len(),
                expected: dim,
            });
        }
    }
    let norms: Vec<f64> = if metric == Metric::Cosine {
        let norms: Vec<f64> = vectors
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(TripletError::ZeroVectorCosine(i));
        }
        norms
    } else {
        Vec::new()
    };

    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = match metric {
                Metric::EuclideanL2 => l2_distance(vectors[i], vectors[j]),
                Metric::Cosine => cosine_distance(vectors[i], vectors[j], norms[i], norms[j]),
            };
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix {
        size: n,
        metric,
        values,
    })
}

/// Batch-hard mining: per anchor, the farthest same-class element and the
/// nearest different-class element. Ties break to the lowest index.
pub fn mine_batch_hard<S: AsRef<str>>(
    dm: &DistanceMatrix,
    labels: &[S],
) -> Result<Vec<MinedTriplet>, TripletError> {
    let n = dm.size();
    if labels.len() != n {
        return Err(TripletError::LabelCountMismatch {
            labels: labels.len(),
            size: n,
        });
    }
    let mut triplets = Vec::with_capacity(n);
    for anchor in 0..n {
        let anchor_label = labels[anchor].as_ref();
        let mut positive: Option<(usize, f64)> = None;
        let mut negative: Option<(usize, f64)> = None;
        for other in 0..n {
            if other == anchor {
                continue;
            }
            let d = dm.get(anchor, other);
            if labels[other].as_ref() == anchor_label {
                // Strict > keeps the lowest index on ties.
                if positive.map_or(true, |(_, best)| d > best) {
                    positive = Some((other, d));
                }
            } else if negative.map_or(true, |(_, best)| d < best) {
                negative = Some((other, d));
            }
        }
        let (positive_idx, d_ap) = positive.ok_or(TripletError::NoPositive(anchor))?;
        let (negative_idx, d_an) = negative.ok_or(TripletError::NoNegative(anchor))?;
        triplets.push(MinedTriplet {
            anchor_idx: anchor,
            positive_idx,
            negative_idx,
            d_ap,
            d_an,
        });
    }
    Ok(triplets)
}

/// A triplet is hard when d_ap + m >= d_an (boundary inclusive).
pub fn is_hard(t: &MinedTriplet, margin: f64) -> bool {
    t.d_ap + margin >= t.d_an
}

/// Sum of (m + d_ap - d_an) over hard triplets; easy triplets contribute 0.
pub fn hard_margin_loss(triplets: &[MinedTriplet], margin: f64) -> f64 {
    triplets
        .iter()
        .filter(|t| is_hard(t, margin))
        .map(|t| margin + t.d_ap - t.d_an)
        .sum()
}

/// Numerically stable softplus: max(x,0) + log1p(exp(-|x|)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sum of softplus(d_ap - d_an) over all mined triplets.
pub fn soft_margin_loss(triplets: &[MinedTriplet]) -> f64 {
    triplets.iter().map(|t| softplus(t.d_ap - t.d_an)).sum()
}

/// Loss under a margin spec, with the configured reduction over anchors.
pub fn triplet_loss(triplets: &[MinedTriplet], margin: MarginSpec, reduction: Reduction) -> f64 {
    let sum = match margin {
        MarginSpec::HardMargin(m) => hard_margin_loss(triplets, m),
        MarginSpec::SoftMargin => soft_margin_loss(triplets),
    };
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => {
            if triplets.is_empty() {
                0.0
            } else {
                sum / triplets.len() as f64
            }
        }
    }
}

/// d(loss)/d(d_ap) per triplet (the d_an derivative is its negation for both
/// losses), before reduction scaling.
pub(crate) fn triplet_distance_grad(t: &MinedTriplet, margin: MarginSpec) -> f64 {
    match margin {
        MarginSpec::HardMargin(m) => {
            if is_hard(t, m) {
                1.0
            } else {
                0.0
            }
        }
        MarginSpec::SoftMargin => {
            // Stable sigmoid of (d_ap - d_an).
            let x = t.d_ap - t.d_an;
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(values: &[f64]) -> Embedding {
        Embedding {
            values: values.to_vec(),
            source_id: String::new(),
        }
    }

    fn embs(vs: &[&[f64]]) -> Vec<Embedding> {
        vs.iter().map(|v| emb(v)).collect()
    }

    /// Exhaustive scan over all valid (anchor, positive, negative)
    /// candidates; the independent oracle for mining.
    pub(crate) fn mine_brute_force(dm: &DistanceMatrix, labels: &[&str]) -> Vec<MinedTriplet> {
        let n = dm.size();
        let mut out = Vec::new();
        for a in 0..n {
            let mut best_p: Option<(usize, f64)> = None;
            let mut best_n: Option<(usize, f64)> = None;
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                let d = dm.get(a, p);
                match best_p {
                    None => best_p = Some((p, d)),
                    Some((_, bd)) if d > bd => best_p = Some((p, d)),
                    _ => {}
                }
            }
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let d = dm.get(a, neg);
                match best_n {
                    None => best_n = Some((neg, d)),
                    Some((_, bd)) if d < bd => best_n = Some((neg, d)),
                    _ => {}
                }
            }
            let (p, d_ap) = best_p.unwrap();
            let (neg, d_an) = best_n.unwrap();
            out.push(MinedTriplet {
                anchor_idx: a,
                positive_idx: p,
                negative_idx: neg,
                d_ap,
                d_an,
            });
        }
        out
    }

    #[test]
    fn identical_vectors_have_zero_distance() {
        let e = embs(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]);
        for metric in [Metric::EuclideanL2, Metric::Cosine] {
            let dm = pairwise_distances(&e, metric).unwrap();
            assert_eq!(dm.get(0, 1), 0.0);
            assert_eq!(dm.get(0, 0), 0.0);
        }
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let e = embs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cos = pairwise_distances(&e, Metric::Cosine).unwrap();
        assert!((cos.get(0, 1) - 1.0).abs() < 1e-15);
        let l2 = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
        assert!((l2.get(0, 1) - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn opposite_vectors_have_cosine_distance_two() {
        let e = embs(&[&[0.5, -1.5], &[-0.5, 1.5]]);
        let dm = pairwise_distances(&e, Metric::Cosine).unwrap();
        assert!((dm.get(0, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let e = embs(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(
            pairwise_distances(&e, Metric::Cosine),
            Err(TripletError::ZeroVectorCosine(0))
        ));
        assert!(pairwise_distances(&e, Metric::EuclideanL2).is_ok());
    }

    #[test]
    fn rejects_single_embedding_and_dim_mismatch() {
        assert!(matches!(
            pairwise_distances(&embs(&[&[1.0]]), Metric::EuclideanL2),
            Err(TripletError::TooFewEmbeddings(1))
        ));
        assert!(matches!(
            pairwise_distances(&embs(&[&[1.0], &[1.0, 2.0]]), Metric::EuclideanL2),
            Err(TripletError::DimensionMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn mining_matches_hand_example() {
        // labels [A,A,B,B], 1-D embeddings [0,1,2,3], L2.
        let e = embs(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let dm = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
        let labels = ["A", "A", "B", "B"];
        let triplets = mine_batch_hard(&dm, &labels).unwrap();
        assert_eq!(triplets.len(), 4);
        let t0 = triplets[0];
        assert_eq!((t0.positive_idx, t0.negative_idx), (1, 2));
        assert_eq!((t0.d_ap, t0.d_an), (1.0, 2.0));
        // Cross-check every anchor against the brute-force scan.
        assert_eq!(triplets, mine_brute_force(&dm, &labels));
    }

    #[test]
    fn mining_yields_one_triplet_per_element() {
        // 3 classes x 3 images -> 9 triplets.
        let mut vs = Vec::new();
        for i in 0..9 {
            vs.push(vec![i as f64 * 0.7, (i as f64).sin()]);
        }
        let e: Vec<Embedding> = vs.iter().map(|v| emb(v)).collect();
        let labels = ["a", "a", "a", "b", "b", "b", "c", "c", "c"];
        let dm = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
        let triplets = mine_batch_hard(&dm, &labels).unwrap();
        assert_eq!(triplets.len(), 9);
        for (i, t) in triplets.iter().enumerate() {
            assert_eq!(t.anchor_idx, i);
            assert_eq!(labels[t.anchor_idx], labels[t.positive_idx]);
            assert_ne!(labels[t.anchor_idx], labels[t.negative_idx]);
            assert_ne!(t.anchor_idx, t.positive_idx);
        }
    }

    #[test]
    fn mining_collapsed_batch_breaks_ties_to_lowest_index() {
        let v: &[f64] = &[1.0, 1.0];
        let e = embs(&[v; 4]);
        let dm = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
        let labels = ["A", "A", "B", "B"];
        let triplets = mine_batch_hard(&dm, &labels).unwrap();
        for t in &triplets {
            assert_eq!(t.d_ap, 0.0);
            assert_eq!(t.d_an, 0.0);
        }
        assert_eq!(triplets[0].positive_idx, 1);
        assert_eq!(triplets[0].negative_idx, 2);
        assert_eq!(triplets[1].positive_idx, 0);
        assert_eq!(triplets[1].negative_idx, 2);
        assert_eq!(triplets[2].positive_idx, 3);
        assert_eq!(triplets[2].negative_idx, 0);
    }

    #[test]
    fn mining_errors_without_partner() {
        let e = embs(&[&[0.0], &[1.0], &[2.0]]);
        let dm = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
        assert!(matches!(
            mine_batch_hard(&dm, &["A", "B", "B"]),
            Err(TripletError::NoPositive(0))
        ));
        assert!(matches!(
            mine_batch_hard(&dm, &["A", "A", "A"]),
            Err(TripletError::NoNegative(0))
        ));
    }

    #[test]
    fn hardness_condition() {
        let t = |d_ap, d_an| MinedTriplet {
            anchor_idx: 0,
            positive_idx: 1,
            negative_idx: 2,
            d_ap,
            d_an,
        };
        assert!(!is_hard(&t(1.0, 2.0), 0.5));
        assert!(is_hard(&t(1.0, 2.0), 1.0)); // boundary inclusive
        assert!(is_hard(&t(0.7, 0.7), 0.001));
    }

    #[test]
    fn hard_margin_loss_values() {
        let t = |d_ap, d_an| MinedTriplet {
            anchor_idx: 0,
            positive_idx: 1,
            negative_idx: 2,
            d_ap,
            d_an,
        };
        assert_eq!(hard_margin_loss(&[], 0.5), 0.0);
        assert_eq!(hard_margin_loss(&[t(1.0, 5.0)], 0.5), 0.0);
        let one = hard_margin_loss(&[t(1.0, 1.2)], 0.5);
        assert!((one - 0.3).abs() < 1e-12);
        // Collapsed batch: every triplet contributes exactly m.
        let collapsed = vec![t(0.0, 0.0); 6];
        assert!((hard_margin_loss(&collapsed, 0.5) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn soft_margin_loss_values() {
        let t = |d_ap, d_an| MinedTriplet {
            anchor_idx: 0,
            positive_idx: 1,
            negative_idx: 2,
            d_ap,
            d_an,
        };
        assert!((soft_margin_loss(&[t(1.0, 1.0)]) - std::f64::consts::LN_2).abs() < 1e-12);
        // softplus(-1) = ln(1 + e^-1)
        assert!((soft_margin_loss(&[t(1.0, 2.0)]) - 0.31326168751822286).abs() < 1e-12);
        // Large positive argument: softplus(x) ~ x with no overflow.
        let big = soft_margin_loss(&[t(51.0, 1.0)]);
        assert!((big - 50.0).abs() < 1e-9);
        assert!(big.is_finite());
    }

    #[test]
    fn soft_margin_is_monotone_in_distances() {
        let base = MinedTriplet {
            anchor_idx: 0,
            positive_idx: 1,
            negative_idx: 2,
            d_ap: 0.8,
            d_an: 1.1,
        };
        let l0 = soft_margin_loss(&[base]);
        let mut up = base;
        up.d_ap += 1e-3;
        assert!(soft_margin_loss(&[up]) > l0);
        let mut down = base;
        down.d_an += 1e-3;
        assert!(soft_margin_loss(&[down]) < l0);
        assert!(l0 > 0.0);
    }

    #[test]
    fn reduction_mean_divides_by_anchor_count() {
        let t = MinedTriplet {
            anchor_idx: 0,
            positive_idx: 1,
            negative_idx: 2,
            d_ap: 1.0,
            d_an: 1.0,
        };
        let ts = vec![t; 4];
        let sum = triplet_loss(&ts, MarginSpec::SoftMargin, Reduction::Sum);
        let mean = triplet_loss(&ts, MarginSpec::SoftMargin, Reduction::Mean);
        assert!((sum - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((mean - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn margin_spec_rejects_non_positive() {
        assert!(MarginSpec::hard(0.0).is_err());
        assert!(MarginSpec::hard(-1.0).is_err());
        assert!(MarginSpec::hard(f64::NAN).is_err());
        assert!(MarginSpec::hard(0.3).is_ok());
    }

    proptest! {
        #[test]
        fn distance_matrix_invariants(
            vecs in proptest::collection::vec(
                proptest::collection::vec(-10.0f64..10.0, 3),
                2..10
            )
        ) {
            let e: Vec<Embedding> = vecs.iter().map(|v| emb(v)).collect();
            let dm = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
            let n = dm.size();
            for i in 0..n {
                prop_assert_eq!(dm.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(dm.get(i, j), dm.get(j, i));
                    prop_assert!(dm.get(i, j) >= 0.0);
                }
            }
        }

        #[test]
        fn cosine_is_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0
        ) {
            prop_assume!(a.iter().any(|&x| x.abs() > 1e-6));
            prop_assume!(b.iter().any(|&x| x.abs() > 1e-6));
            let scaled: Vec<f64> = b.iter().map(|&x| c * x).collect();
            let d1 = pairwise_distances(&embs(&[&a, &b]), Metric::Cosine).unwrap().get(0, 1);
            let d2 = pairwise_distances(&embs(&[&a, &scaled]), Metric::Cosine).unwrap().get(0, 1);
            prop_assert!((d1 - d2).abs() < 1e-6);
        }

        /// Oracle equivalence on small batches: mining equals the exhaustive
        /// scan, including index tie-breaks.
        #[test]
        fn mining_matches_brute_force(
            seed in 0u64..5000,
            n_classes in 2usize..4,
            per_class in 2usize..4,
            dim in 2usize..5
        ) {
            use rand::Rng;
            use rand_chacha::rand_core::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut vectors = Vec::new();
            let mut labels = Vec::new();
            let names = ["p", "q", "r", "s"];
            for class in 0..n_classes {
                for _ in 0..per_class {
                    vectors.push((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
                    labels.push(names[class]);
                }
            }
            let e: Vec<Embedding> = vectors.iter().map(|v| emb(v)).collect();
            let dm = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
            let mined = mine_batch_hard(&dm, &labels).unwrap();
            prop_assert_eq!(mined, mine_brute_force(&dm, &labels));
        }

        /// Permuting the batch then mining gives the same triplets mapped
        /// through the permutation, when distances are tie-free.
        #[test]
        fn mining_is_permutation_equivariant(seed in 0u64..2000) {
            use rand::Rng;
            use rand::seq::SliceRandom;
            use rand_chacha::rand_core::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels = ["a", "a", "a", "b", "b", "c", "c"];
            let vectors: Vec<Vec<f64>> = (0..labels.len())
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut perm: Vec<usize> = (0..labels.len()).collect();
            perm.shuffle(&mut rng);

            let e: Vec<Embedding> = vectors.iter().map(|v| emb(v)).collect();
            let dm = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
            let base = mine_batch_hard(&dm, &labels).unwrap();

            let perm_vectors: Vec<Embedding> = perm.iter().map(|&i| emb(&vectors[i])).collect();
            let perm_labels: Vec<&str> = perm.iter().map(|&i| labels[i]).collect();
            let dm2 = pairwise_distances(&perm_vectors, Metric::EuclideanL2).unwrap();
            let permuted = mine_batch_hard(&dm2, &perm_labels).unwrap();

            // perm[i] is the original index sitting at position i.
            for (pos, t) in permuted.iter().enumerate() {
                let orig = &base[perm[pos]];
                prop_assert_eq!(perm[t.positive_idx], orig.positive_idx);
                prop_assert_eq!(perm[t.negative_idx], orig.negative_idx);
                prop_assert!((t.d_ap - orig.d_ap).abs() < 1e-12);
                prop_assert!((t.d_an - orig.d_an).abs() < 1e-12);
            }
        }

        #[test]
        fn hard_margin_loss_nonnegative_and_zero_iff_separated(
            seed in 0u64..2000, margin in 0.01f64..1.0
        ) {
            use rand::Rng;
            use rand_chacha::rand_core::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels = ["a", "a", "b", "b"];
            let vectors: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let e: Vec<Embedding> = vectors.iter().map(|v| emb(v)).collect();
            let dm = pairwise_distances(&e, Metric::EuclideanL2).unwrap();
            let triplets = mine_batch_hard(&dm, &labels).unwrap();
            let loss = hard_margin_loss(&triplets, margin);
            prop_assert!(loss >= 0.0);
            let separated = triplets.iter().all(|t| t.d_an > t.d_ap + margin);
            prop_assert_eq!(loss == 0.0, separated);
        }
    }
}
