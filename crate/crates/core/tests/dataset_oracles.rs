use selcls::datasets::{bayes_posterior, generate_mixture, split_dataset, MixtureSpec};

/// Sampling oracle for the posterior: for any region R and class k,
/// E[1{y=k} 1{x in R}] = E[p_k(x) 1{x in R}]. Checked on 10^5 draws,
/// per quadrant and class, within three standard errors.
#[test]
fn posterior_matches_sampled_label_frequencies() {
    let mut spec = MixtureSpec::blobs8(0);
    spec.n_classes = 3;
    spec.means = vec![vec![0.0, 1.0], vec![1.0, -0.5], vec![-1.0, -0.5]];
    spec.variances = vec![1.0, 0.6, 1.5];
    spec.priors = vec![0.5, 0.3, 0.2];
    spec.label_noise = 0.2;
    spec.n_train = 100_000;
    spec.n_val = 0;
    spec.n_test = 1;
    spec.seed = 17;
    let data = generate_mixture(&spec).unwrap().train;
    let n = data.len() as f64;
    let quadrant = |x: &[f64]| (x[0] >= 0.0) as usize * 2 + (x[1] >= 0.0) as usize;
    let posts: Vec<Vec<f64>> = (0..data.len()).map(|i| bayes_posterior(&spec, data.features.row(i))).collect();
    for q in 0..4 {
        for k in 0..3 {
            let diffs: Vec<f64> = (0..data.len())
                .map(|i| {
                    if quadrant(data.features.row(i)) != q {
                        return 0.0;
                    }
                    (data.labels[i] == k) as u8 as f64 - posts[i][k]
                })
                .collect();
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!(mean.abs() < 3.0 * se, "quadrant {q} class {k}: {mean} vs se {se}");
        }
    }
}

#[test]
fn posterior_sums_to_one_and_mixes_noise() {
    let spec = MixtureSpec::blobs8(0);
    for x in [[0.0, 0.0], [2.2, 0.0], [-5.0, 3.0], [100.0, -100.0]] {
        let p = bayes_posterior(&spec, &x);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // noise puts at least eta/(C-1) on every class and caps any class at 1-eta
        assert!(p.iter().all(|v| (0.1 / 7.0 - 1e-12..=0.9 + 1e-12).contains(v)), "{p:?}");
    }
}

#[test]
fn split_partitions_are_disjoint_and_seeded() {
    let mut spec = MixtureSpec::blobs8(4);
    spec.n_train = 1000;
    let data = generate_mixture(&spec).unwrap().train;
    let a = split_dataset(&data, &[0.5, 0.3, 0.2], 1).unwrap();
    let b = split_dataset(&data, &[0.5, 0.3, 0.2], 1).unwrap();
    assert_eq!(a, b);
    let rows = |d: &selcls::datasets::Dataset| -> Vec<Vec<u64>> {
        (0..d.len()).map(|i| d.features.row(i).iter().map(|v| v.to_bits()).collect()).collect()
    };
    let mut all: Vec<Vec<u64>> = a.iter().flat_map(rows).collect();
    let total = all.len();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), total);
    assert_eq!(total, 1000);
}
