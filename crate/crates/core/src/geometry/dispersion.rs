use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::PlanarEmbedding;
use crate::stats::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `1 - cos(a, b)`; depends on where the layout's origin sits.
    Cosine,
    /// Plain Euclidean distance, for robustness checks.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionOptions {
    pub metric: DistanceMetric,
    /// Bins with more members than this are estimated from
    /// `cap * (cap - 1) / 2` uniformly sampled pairs. `None` = always exact.
    pub pair_cap: Option<usize>,
    pub seed: u64,
}

impl Default for DispersionOptions {
    fn default() -> Self {
        Self {
            metric: DistanceMetric::Cosine,
            pair_cap: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinDispersion {
    pub value: f64,
    pub members: usize,
    pub pairs: usize,
    pub sampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionReport {
    pub per_bin: BTreeMap<u8, BinDispersion>,
    /// Mean over reported bins.
    pub mean: Option<f64>,
    /// Points left out of cosine pairs because their coordinates are zero.
    pub zero_norm_excluded: usize,
    /// Bins with fewer than two usable members, with their member count.
    pub omitted_bins: BTreeMap<u8, usize>,
}

fn pair_distance(metric: DistanceMetric, a: [f64; 2], b: [f64; 2]) -> f64 {
    match metric {
        DistanceMetric::Cosine => {
            let dot = a[0] * b[0] + a[1] * b[1];
            let na = a[0].hypot(a[1]);
            let nb = b[0].hypot(b[1]);
            (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
        }
        DistanceMetric::Euclidean => (a[0] - b[0]).hypot(a[1] - b[1]),
    }
}

/// Mean pairwise distance among same-bin points, per bin.
pub fn dispersion(embedding: &PlanarEmbedding, options: &DispersionOptions) -> DispersionReport {
    let mut groups: BTreeMap<u8, Vec<[f64; 2]>> = BTreeMap::new();
    let mut zero_norm_excluded = 0;
    for (&bin, &c) in embedding.concreteness_bin.iter().zip(&embedding.coords) {
        let group = groups.entry(bin).or_default();
        if options.metric == DistanceMetric::Cosine && c[0] == 0.0 && c[1] == 0.0 {
            zero_norm_excluded += 1;
            continue;
        }
        group.push(c);
    }
    if zero_norm_excluded > 0 {
        log::warn!("dispersion: {zero_norm_excluded} zero-norm points excluded from cosine pairs");
    }

    let mut per_bin = BTreeMap::new();
    let mut omitted_bins = BTreeMap::new();
    for (bin, members) in groups {
        let m = members.len();
        if m < 2 {
            log::warn!("dispersion: bin {bin} has {m} usable members, omitted");
            omitted_bins.insert(bin, m);
            continue;
        }
        let mut acc = CompensatedSum::new();
        let exact = options.pair_cap.is_none_or(|cap| m <= cap);
        let pairs = if exact {
            for i in 0..m {
                for j in (i + 1)..m {
                    acc.add(pair_distance(options.metric, members[i], members[j]));
                }
            }
            m * (m - 1) / 2
        } else {
            let cap = options.pair_cap.unwrap_or(m).max(2);
            let draws = cap * (cap - 1) / 2;
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ u64::from(bin).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for _ in 0..draws {
                let i = rng.random_range(0..m);
                let mut j = rng.random_range(0..m - 1);
                if j >= i {
                    j += 1;
                }
                acc.add(pair_distance(options.metric, members[i], members[j]));
            }
            draws
        };
        per_bin.insert(
            bin,
            BinDispersion {
                value: acc.total() / pairs as f64,
                members: m,
                pairs,
                sampled: !exact,
            },
        );
    }
    let values: Vec<f64> = per_bin.values().map(|b| b.value).collect();
    DispersionReport {
        mean: crate::stats::mean(&values),
        per_bin,
        zero_norm_excluded,
        omitted_bins,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assume, proptest};

    fn planar(coords: Vec<[f64; 2]>, bins: Vec<u8>) -> PlanarEmbedding {
        PlanarEmbedding {
            words: (0..coords.len()).map(|i| format!("w{i}")).collect(),
            coords,
            concreteness_bin: bins,
        }
    }

    fn brute_force(points: &[[f64; 2]]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (i, a) in points.iter().enumerate() {
            for (j, b) in points.iter().enumerate() {
                if i != j {
                    let cos = (a[0] * b[0] + a[1] * b[1])
                        / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt());
                    total += 1.0 - cos;
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_and_orthogonal_pairs() {
        let r = dispersion(&planar(vec![[1.0, 0.0], [1.0, 0.0]], vec![3, 3]), &DispersionOptions::default());
        assert_eq!(r.per_bin[&3].value, 0.0);
        let r = dispersion(&planar(vec![[1.0, 0.0], [0.0, 1.0]], vec![3, 3]), &DispersionOptions::default());
        assert!((r.per_bin[&3].value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn thirty_point_bin_matches_ordered_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let pts: Vec<[f64; 2]> = (0..30).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect();
        let r = dispersion(&planar(pts.clone(), vec![2; 30]), &DispersionOptions::default());
        assert!((r.per_bin[&2].value - brute_force(&pts)).abs() < 1e-12);
        assert_eq!(r.per_bin[&2].pairs, 435);
    }

    #[test]
    fn degenerate_members_are_reported() {
        let r = dispersion(
            &planar(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [1.0, 3.0], [0.5, 0.5]], vec![1, 1, 2, 2, 4]),
            &DispersionOptions::default(),
        );
        assert_eq!(r.zero_norm_excluded, 1);
        assert_eq!(r.omitted_bins.get(&1), Some(&1));
        assert_eq!(r.omitted_bins.get(&4), Some(&1));
        assert_eq!(r.per_bin.len(), 1);
        assert_eq!(r.mean, Some(r.per_bin[&2].value));
    }

    #[test]
    fn sampling_is_seeded_and_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 2]> = (0..400).map(|_| [rng.random_range(0.1..3.0), rng.random_range(-3.0..3.0)]).collect();
        let emb = planar(pts, vec![5; 400]);
        let exact = dispersion(&emb, &DispersionOptions::default()).per_bin[&5].value;
        let opts = DispersionOptions { pair_cap: Some(150), seed: 4, ..DispersionOptions::default() };
        let a = dispersion(&emb, &opts).per_bin[&5].clone();
        let b = dispersion(&emb, &opts).per_bin[&5].clone();
        assert_eq!(a, b);
        assert!(a.sampled);
        assert_eq!(a.pairs, 150 * 149 / 2);
        assert!((a.value - exact).abs() < 0.02, "{} vs {exact}", a.value);
    }

    #[test]
    fn euclidean_metric_ignores_origin() {
        let opts = DispersionOptions { metric: DistanceMetric::Euclidean, ..DispersionOptions::default() };
        let r = dispersion(&planar(vec![[0.0, 0.0], [3.0, 4.0]], vec![1, 1]), &opts);
        assert_eq!(r.per_bin[&1].value, 5.0);
        assert_eq!(r.zero_norm_excluded, 0);
    }

    proptest! {
        #[test]
        fn bounded_and_scale_invariant(
            pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.01f64..100.0), 2..25)
        ) {
            let coords: Vec<[f64; 2]> = pts.iter().map(|&(x, y, _)| [x, y]).filter(|c| c[0] != 0.0 || c[1] != 0.0).collect();
            prop_assume!(coords.len() >= 2);
            let scaled: Vec<[f64; 2]> = coords.iter().zip(&pts).map(|(c, &(_, _, s))| [c[0] * s, c[1] * s]).collect();
            let n = coords.len();
            let a = dispersion(&planar(coords, vec![1; n]), &DispersionOptions::default()).per_bin[&1].value;
            let b = dispersion(&planar(scaled, vec![1; n]), &DispersionOptions::default()).per_bin[&1].value;
            prop_assert!((0.0..=2.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn zero_iff_common_direction(dir in 0.0f64..std::f64::consts::TAU, scales in proptest::collection::vec(0.1f64..10.0, 2..10)) {
            let coords: Vec<[f64; 2]> = scales.iter().map(|s| [s * dir.cos(), s * dir.sin()]).collect();
            let n = coords.len();
            let v = dispersion(&planar(coords, vec![2; n]), &DispersionOptions::default()).per_bin[&2].value;
            prop_assert!(v.abs() < 1e-12);
        }
    }
}
