use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use scrmf_core::eval_metrics::*;

/// All set partitions of `n` items as restricted growth strings.
fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(cur: &mut Vec<usize>, n: usize, max: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for l in 0..=max + 1 {
            cur.push(l);
            grow(cur, n, max.max(l), out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return vec![vec![]];
    }
    let mut cur = vec![0];
    grow(&mut cur, n, 0, &mut out);
    out
}

/// ARI from the four pair-agreement counts.
fn brute_ari(u: &[usize], v: &[usize]) -> f64 {
    let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            match (u[i] == u[j], v[i] == v[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let denom = (a + b) * (b + d) + (a + c) * (c + d);
    if denom == 0.0 {
        1.0
    } else {
        2.0 * (a * d - b * c) / denom
    }
}

fn part(l: &[usize]) -> Partition {
    Partition::new(l.to_vec())
}

#[test]
fn bell_numbers() {
    let counts: Vec<usize> = (1..=8).map(|n| set_partitions(n).len()).collect();
    assert_eq!(counts, vec![1, 2, 5, 15, 52, 203, 877, 4140]);
}

#[test]
fn ari_matches_pair_counting_on_all_small_partitions() {
    for n in 1..=8 {
        let parts = set_partitions(n);
        let worst = parts
            .par_iter()
            .map(|u| {
                let pu = part(u);
                parts
                    .iter()
                    .map(|v| (ari(&pu, &part(v)).unwrap() - brute_ari(u, v)).abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        assert!(worst <= 1e-12, "n = {n}: max deviation {worst}");
    }
}

#[test]
fn ari_is_one_exactly_for_relabelings() {
    let parts = set_partitions(6);
    for u in &parts {
        for v in &parts {
            let a = ari(&part(u), &part(v)).unwrap();
            let k = u.iter().max().unwrap() + 1;
            // Restricted growth strings are canonical, so equal strings are
            // exactly the relabelings of each other.
            if u == v && k > 1 && k < u.len() {
                assert_eq!(a, 1.0);
            } else if u != v {
                assert!(a < 1.0, "{u:?} {v:?} -> {a}");
            }
        }
    }
}

#[test]
fn nmi_against_direct_evaluation() {
    let (u, v) = ([0, 0, 1, 1], [0, 0, 0, 1]);
    // Table: u0 = {v0: 2}, u1 = {v0: 1, v1: 1}; n = 4.
    let ln = f64::ln;
    let mi = 0.5 * ln(0.5 / (0.5 * 0.75)) + 0.25 * ln(0.25 / (0.5 * 0.75)) + 0.25 * ln(0.25 / (0.5 * 0.25));
    let hu = -2.0 * 0.5 * ln(0.5);
    let hv = -(0.75 * ln(0.75) + 0.25 * ln(0.25));
    let expected = 2.0 * mi / (hu + hv);
    let got = nmi(&part(&u), &part(&v)).unwrap();
    assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    assert_eq!(nmi(&part(&[0, 1, 2, 2]), &part(&[2, 0, 1, 1])).unwrap(), 1.0);
    assert!(nmi(&part(&[0, 0, 1, 1]), &part(&[0, 1, 0, 1])).unwrap().abs() < 1e-15);
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

proptest! {
    #[test]
    fn ari_nmi_symmetry_and_bounds(
        (u, v) in (2usize..40).prop_flat_map(|n| (labels(n, 5), labels(n, 4)))
    ) {
        let (pu, pv) = (part(&u), part(&v));
        let a = ari(&pu, &pv).unwrap();
        prop_assert_eq!(a, ari(&pv, &pu).unwrap());
        prop_assert!(a <= 1.0);
        let m = nmi(&pu, &pv).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((m - nmi(&pv, &pu).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ari_nmi_permutation_invariance(
        (u, v) in (2usize..40).prop_flat_map(|n| (labels(n, 4), labels(n, 4))),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let relabeled: Vec<usize> = u.iter().map(|&l| perm[l]).collect();
        let (pu, pr, pv) = (part(&u), part(&relabeled), part(&v));
        prop_assert_eq!(ari(&pu, &pv).unwrap(), ari(&pr, &pv).unwrap());
        prop_assert!((nmi(&pu, &pv).unwrap() - nmi(&pr, &pv).unwrap()).abs() < 1e-12);
    }
}

fn rows(data: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_fn(data.len(), data[0].len(), |i, j| data[i][j])
}

fn blobs(centers: &[[f64; 2]], per: usize, sd: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).unwrap();
    let n = centers.len() * per;
    let mut m = DMatrix::zeros(n, 2);
    let mut truth = Vec::with_capacity(n);
    for (k, c) in centers.iter().enumerate() {
        for i in 0..per {
            let r = k * per + i;
            m[(r, 0)] = c[0] + noise.sample(&mut rng);
            m[(r, 1)] = c[1] + noise.sample(&mut rng);
            truth.push(k);
        }
    }
    (m, truth)
}

#[test]
fn kmeans_trivial_cases() {
    let cfg = KMeansConfig::default();
    let pts = rows(&[&[0.0], &[0.0], &[10.0], &[10.0]]);
    let r = kmeans(&pts, 2, 1, &cfg).unwrap();
    assert_eq!(r.wcss, 0.0);
    let l = r.partition.labels();
    assert!(l[0] == l[1] && l[2] == l[3] && l[0] != l[2]);

    let (m, _) = blobs(&[[0.0, 0.0], [3.0, 1.0]], 6, 1.0, 4);
    assert_eq!(kmeans(&m, 12, 0, &cfg).unwrap().wcss, 0.0);
    assert!(matches!(
        kmeans(&m, 13, 0, &cfg),
        Err(EvalError::KTooLarge { k: 13, n: 12 })
    ));
}

#[test]
fn kmeans_recovers_blobs_and_is_seeded() {
    let (m, truth) = blobs(&[[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]], 40, 1.0, 7);
    let cfg = KMeansConfig::default();
    let r = kmeans(&m, 3, 11, &cfg).unwrap();
    assert_eq!(ari(&r.partition, &part(&truth)).unwrap(), 1.0);
    let again = kmeans(&m, 3, 11, &cfg).unwrap();
    assert_eq!(r.partition, again.partition);
    assert_eq!(r.wcss, again.wcss);
}

#[test]
fn lloyd_wcss_never_increases() {
    let cfg = KMeansConfig {
        n_restarts: 1,
        ..KMeansConfig::default()
    };
    for seed in 0..20 {
        let (m, _) = blobs(&[[0.0, 0.0], [2.0, 0.0], [1.0, 2.0], [4.0, 4.0]], 25, 1.5, seed);
        let r = kmeans(&m, 5, seed, &cfg).unwrap();
        for w in r.wcss_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {:?}", r.wcss_trace);
        }
    }
}

#[test]
fn elbow_curve_properties() {
    let (m, _) = blobs(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 30, 1.0, 2);
    let n = m.nrows();
    let cfg = KMeansConfig::default();
    let curve = elbow_curve(&m, 1..=6, 5, &cfg).unwrap();
    let tss: f64 = (0..2)
        .map(|j| {
            let col = m.column(j);
            let mu = col.mean();
            col.iter().map(|x| (x - mu).powi(2)).sum::<f64>()
        })
        .sum();
    assert!((curve[0].1 - tss).abs() < 1e-9 * tss);
    for w in curve.windows(2) {
        assert!(w[1].1 <= w[0].1, "{curve:?}");
    }
    let drops: Vec<f64> = curve.windows(2).map(|w| (w[0].1 - w[1].1) / w[0].1).collect();
    // Largest relative drop happens when moving to k = 3.
    let best = drops
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(curve[best + 1].0, 3, "{drops:?}");

    let full = elbow_curve(&m, n - 1..=n, 5, &cfg).unwrap();
    assert_eq!(full[1].1, 0.0);
    // Range used by the original analysis.
    assert_eq!(elbow_curve(&m, 5..=10, 5, &cfg).unwrap().len(), 6);
}

#[test]
fn pca_rank_one_line() {
    let m = DMatrix::from_fn(20, 2, |i, _| i as f64 * 0.37 - 2.0);
    let p = pca(&m, 2).unwrap();
    assert!(p.singular_values[1].abs() < 1e-10, "{:?}", p.singular_values);
    let v = p.components.row(0);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    assert!((v[0] - r).abs() < 1e-12 && (v[1] - r).abs() < 1e-12);
}

#[test]
fn pca_recovers_axes_of_orthogonal_design() {
    // Spread 3 along x, 1 along y, centered.
    let m = rows(&[&[3.0, 0.0], &[-3.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
    let p = pca(&m, 2).unwrap();
    assert!((p.components[(0, 0)] - 1.0).abs() < 1e-12 && p.components[(0, 1)].abs() < 1e-12);
    assert!(p.components[(1, 0)].abs() < 1e-12 && (p.components[(1, 1)] - 1.0).abs() < 1e-12);
}

#[test]
fn pca_reconstruction_error_shrinks_with_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = Uniform::new(-1.0, 1.0).unwrap();
    let m = DMatrix::from_fn(50, 10, |_, _| u.sample(&mut rng));
    let mut last = f64::INFINITY;
    for k in 1..=10 {
        let err = (pca(&m, k).unwrap().reconstruct() - &m).norm();
        assert!(err <= last + 1e-12, "k = {k}: {err} > {last}");
        last = err;
    }
    assert!(last < 1e-8);
    assert!(matches!(pca(&m, 11), Err(EvalError::ComponentCount { .. })));
    assert!(matches!(pca(&m, 0), Err(EvalError::ComponentCount { .. })));
}

#[test]
fn pca_sign_convention() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = Uniform::new(-1.0, 1.0).unwrap();
    let m = DMatrix::from_fn(30, 6, |_, _| u.sample(&mut rng));
    let p = pca(&m, 4).unwrap();
    for row in p.components.row_iter() {
        let lead = row.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
        assert!(lead > 0.0);
    }
}

#[test]
fn group_summary_student_t_interval() {
    let s = group_summary(&[1.0, 2.0, 3.0, 5.0, 5.0], &part(&[0, 0, 0, 1, 1])).unwrap();
    assert_eq!(s[0].mean, 2.0);
    assert!((s[0].sd - 1.0).abs() < 1e-15);
    // t(0.975, 2) = 4.302653
    assert!((s[0].ci95.0 - (2.0 - 4.302653 / 3f64.sqrt())).abs() < 1e-5);
    assert!((s[0].ci95.0 + 0.484).abs() < 1e-3 && (s[0].ci95.1 - 4.484).abs() < 1e-3);
    assert_eq!(s[1].sd, 0.0);
    assert_eq!(s[1].ci95, (5.0, 5.0));
}

#[test]
fn welch_statistic_matches_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = Normal::new(0.0, 1.0).unwrap();
    let a: Vec<f64> = (0..1000).map(|_| n.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..1000).map(|_| 1.0 + n.sample(&mut rng)).collect();
    let w = welch_t(&a, &b).unwrap();
    assert!((w.t + 22.4).abs() < 3.0, "t = {}", w.t);
    assert!(w.df > 1900.0 && w.df < 1998.0 + 1e-9, "df = {}", w.df);

    // Hand-computed: means 2 and 5, variances 1 and 4, n = 3 each.
    let w = welch_t(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
    let se2: f64 = 1.0 / 3.0 + 4.0 / 3.0;
    assert!((w.t - (-3.0 / se2.sqrt())).abs() < 1e-12);
    let df = se2 * se2 / ((1.0f64 / 3.0).powi(2) / 2.0 + (4.0f64 / 3.0).powi(2) / 2.0);
    assert!((w.df - df).abs() < 1e-12);
}
