use nimc_core::data::{gen_gaussian_features, gen_truth, random_init, sample_observations, TruthSpec};
use nimc_core::io;
use nimc_core::optimizer::{train, TrainConfig};
use nimc_core::pipelines::{cluster_pipeline, gaussian_blobs, recovery_grid, ClusterConfig, ClusterTask, GridConfig};
use nimc_core::{loss, ActivationKind, RngSeed};

#[test]
fn more_similarity_supervision_does_not_hurt_on_average() {
    let cfg = ClusterConfig::default();
    let (mut sparse, mut full) = (0.0, 0.0);
    for s in 0..10u64 {
        let seed = RngSeed::new(40 + s);
        let (x, labels) = gaussian_blobs(3, 20, 5, 2.5, seed.substream(0)).unwrap();
        let n = x.nrows();
        let few = ClusterTask::sample(x.clone(), labels.clone(), 3, 5 * n, seed.substream(1)).unwrap();
        let all = ClusterTask::fully_observed(x, labels, 3).unwrap();
        sparse += cluster_pipeline(&few, &cfg, 10, seed.substream(2)).unwrap().error;
        full += cluster_pipeline(&all, &cfg, 10, seed.substream(2)).unwrap().error;
    }
    assert!(full <= sparse, "mean error with all pairs {} vs 5n pairs {}", full / 10.0, sparse / 10.0);
}

#[test]
fn largest_sigmoid_cell_recovers_every_trial() {
    let cfg = GridConfig::default();
    let res = recovery_grid(ActivationKind::Sigmoid, 10, 5, &[100], &[2000], 5, &cfg, RngSeed::new(1)).unwrap();
    assert_eq!(res.rate(100, 2000), Some(1.0));
}

#[test]
fn saved_problem_reloads_to_identical_loss_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let seed = RngSeed::new(5);
    let kind = ActivationKind::Tanh;
    let truth = gen_truth(kind, 4, 3, 2, TruthSpec::Gaussian, seed.substream(0)).unwrap();
    let fs = gen_gaussian_features(30, 20, 4, 3, seed.substream(1)).unwrap();
    let obs = sample_observations(&fs, &truth, 250, seed.substream(2)).unwrap();
    let p = |f: &str| dir.path().join(f);
    std::fs::write(p("X.txt"), io::matrix_to_string(fs.x())).unwrap();
    std::fs::write(p("Y.txt"), io::matrix_to_string(fs.y())).unwrap();
    std::fs::write(p("U.txt"), io::matrix_to_string(truth.u())).unwrap();
    std::fs::write(p("V.txt"), io::matrix_to_string(truth.v())).unwrap();
    std::fs::write(p("obs.csv"), io::observations_to_string(&obs)).unwrap();

    let fs2 = io::load_features(p("X.txt"), p("Y.txt")).unwrap();
    let obs2 = io::load_observations_for(p("obs.csv"), &fs2).unwrap();
    let truth2 = io::load_factors(p("U.txt"), p("V.txt"), kind).unwrap();
    assert_eq!(fs2.x(), fs.x());
    assert_eq!(obs2, obs);

    let init = random_init(kind, 4, 3, 2, seed.substream(3)).unwrap();
    assert_eq!(loss(&init, &fs, &obs).unwrap().value, loss(&init, &fs2, &obs2).unwrap().value);
    let cfg = TrainConfig { max_iters: 50, ..TrainConfig::default() };
    let (_, a) = train(&init, Some(&truth), &fs, &obs, &cfg).unwrap();
    let (_, b) = train(&init, Some(&truth2), &fs2, &obs2, &cfg).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}
