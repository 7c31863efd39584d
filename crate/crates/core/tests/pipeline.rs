use std::fs;
use std::path::Path;

use softdrop::bayes::elbo_minibatch;
use softdrop::config::{DatasetKind, ExperimentConfig};
use softdrop::data::{self, IdxArray, Split, SplitSpec, ValSource};
use softdrop::experiment;
use softdrop::model::{mlp_layers, Architecture, Method, ModelBlueprint};
use softdrop::rng::SeedLineage;
use softdrop::{uncertainty, Error, Tensor};

fn blob_cfg(method: Method, p: Option<f64>, dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(method, p);
    c.dataset = DatasetKind::Blobs;
    c.architecture = Architecture::Mlp;
    c.blob_per_class = 40;
    c.epochs = 2;
    c.batch_size = 8;
    c.val_passes = 4;
    c.test_passes = 6;
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn test_pass_count_does_not_touch_training() {
    let dir = tempfile::tempdir().unwrap();
    let a = blob_cfg(Method::SdcStrong, Some(0.3), &dir.path().join("a"));
    let mut b = a.clone();
    b.test_passes = 60;
    b.output_dir = dir.path().join("b");
    let data = experiment::load_data(&a).unwrap();
    let ra = experiment::train_on(&a, &data, &mut |_| {}).unwrap();
    let rb = experiment::train_on(&b, &data, &mut |_| {}).unwrap();
    assert_eq!(ra.model.params, rb.model.params);
    assert_eq!(ra.history, rb.history);
}

#[test]
fn monte_carlo_replays_bit_for_bit() {
    let model = ModelBlueprint::new(mlp_layers(2, 16, 3), vec![2], 3, Method::Dropconnect, 0.5)
        .build(4)
        .unwrap();
    let x = Tensor::new(&[3, 2], vec![0.1, 0.9, -0.4, 0.3, 0.7, -0.8]).unwrap();
    let a = uncertainty::mc_predict_batch(&model, &x, 30, 77).unwrap();
    let b = uncertainty::mc_predict_batch(&model, &x, 30, 77).unwrap();
    let c = uncertainty::mc_predict_batch(&model, &x, 30, 78).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|s| !s.deterministic_warning && s.mutual_information > 0.0));
    let one = uncertainty::mc_predict(&model, &x.slice_outer(1).unwrap(), 1, 5).unwrap();
    assert_eq!(one.mutual_information, 0.0);
}

#[test]
fn deterministic_model_flags_repeated_passes() {
    let model = ModelBlueprint::new(mlp_layers(2, 8, 3), vec![2], 3, Method::Deterministic, 0.0)
        .build(4)
        .unwrap();
    let x = Tensor::new(&[1, 2], vec![0.2, -0.6]).unwrap();
    let s = uncertainty::mc_predict(&model, &x, 100, 1).unwrap();
    assert!(s.deterministic_warning);
    assert_eq!(s.mutual_information, 0.0);
    assert!(s.std_per_class.iter().all(|&v| v == 0.0));
    let zero_rate = ModelBlueprint::new(mlp_layers(2, 8, 3), vec![2], 3, Method::Sdc, 0.0)
        .build(4)
        .unwrap();
    assert!(
        uncertainty::mc_predict(&zero_rate, &x, 10, 1)
            .unwrap()
            .deterministic_warning
    );
}

#[test]
fn kl_weight_enters_linearly() {
    let model = ModelBlueprint::new(mlp_layers(2, 6, 3), vec![2], 3, Method::Bbb, 0.0)
        .build(9)
        .unwrap();
    let x = Tensor::new(&[2, 2], vec![0.3, -0.2, 0.8, 0.5]).unwrap();
    let lineage = SeedLineage::new(5, 2, 0);
    let at = |w: f64| elbo_minibatch(&model, &x, &[0, 2], 3, w, lineage).unwrap();
    let base = at(0.0);
    for c in [0.01, 0.5, 2.0] {
        let e = at(c);
        assert_eq!(e.nll, base.nll);
        let kl = e.log_q - e.log_prior;
        assert!(((e.total - base.total) - c * kl).abs() <= 1e-9 * kl.abs().max(1.0));
    }
    assert!(matches!(
        elbo_minibatch(&model, &x, &[], 3, 1.0, lineage),
        Err(Error::Config(_))
    ));
}

#[test]
fn comparison_rows_match_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let one = blob_cfg(Method::Dropout, Some(0.25), &dir.path().join("solo"));
    let report =
        experiment::compare_methods(std::slice::from_ref(&one), &dir.path().join("cmp1"), &mut |_, _| {}).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert_eq!(row.accuracy_mean, report.runs[0].accuracy);
    assert_eq!(row.mi_mean, report.runs[0].mean_mi_bits);
    assert_eq!(row.accuracy_sd, None);

    let mut two = one.clone();
    two.seed = 1;
    two.output_dir = dir.path().join("seed1");
    let mut first = one.clone();
    first.output_dir = dir.path().join("seed0");
    let report = experiment::compare_methods(&[first, two], &dir.path().join("cmp2"), &mut |_, _| {}).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].seeds, vec![0, 1]);
    assert!(report.rows[0].accuracy_sd.is_some() && report.rows[0].mi_sd.is_some());
}

#[test]
fn restored_checkpoint_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blob_cfg(Method::Bbb, None, dir.path());
    let data = experiment::load_data(&cfg).unwrap();
    let trained = experiment::train_on(&cfg, &data, &mut |_| {}).unwrap().model;
    let path = dir.path().join(experiment::CHECKPOINT_FILE);
    let loaded = experiment::load_model(&cfg, &path, &[2], 3).unwrap();
    let a = uncertainty::mc_predict_batch(&trained, &data.test.inputs, 5, 3).unwrap();
    let b = uncertainty::mc_predict_batch(&loaded, &data.test.inputs, 5, 3).unwrap();
    assert_eq!(a, b);
    let mut wrong = cfg.clone();
    wrong.method = Method::Sdc;
    wrong.p = Some(0.5);
    assert!(matches!(
        experiment::load_model(&wrong, &path, &[2], 3),
        Err(Error::Config(_))
    ));
}

fn write_idx(path: &Path, dims: Vec<usize>, payload: Vec<u8>) {
    fs::write(path, IdxArray::new(dims, payload).unwrap().to_bytes()).unwrap();
}

fn fake_mnist(dir: &Path, n_train: usize, n_test: usize, prefix: &str) {
    let img = |n: usize| (0..n * 784).map(|i| (i % 256) as u8).collect::<Vec<u8>>();
    let lab = |n: usize| (0..n).map(|i| (i % 10) as u8).collect::<Vec<u8>>();
    write_idx(
        &dir.join(format!("{prefix}train-img")),
        vec![n_train, 28, 28],
        img(n_train),
    );
    write_idx(&dir.join(format!("{prefix}train-lab")), vec![n_train], lab(n_train));
    write_idx(
        &dir.join(format!("{prefix}test-img")),
        vec![n_test, 28, 28],
        img(n_test),
    );
    write_idx(&dir.join(format!("{prefix}test-lab")), vec![n_test], lab(n_test));
}

#[test]
fn mnist_loading_with_custom_file_names() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path(), 30, 12, "my-");
    let mut cfg = ExperimentConfig::desk(Method::Dropout, Some(0.5));
    cfg.data_dir = dir.path().to_path_buf();
    cfg.train_images = "my-train-img".into();
    cfg.train_labels = "my-train-lab".into();
    cfg.test_images = "my-test-img".into();
    cfg.test_labels = "my-test-lab".into();
    cfg.train_size = 20;
    cfg.val_size = 5;
    cfg.test_size = 10;
    let s = experiment::load_data(&cfg).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (20, 5, 10));
    assert_eq!(s.train.split, Split::Train);
    assert_eq!(s.train.inputs.shape(), &[20, 1, 28, 28]);
    assert_eq!(s.train.inputs.data()[255], 1.0);
    assert_eq!(s.train.inputs.data()[0], 0.0);
    assert!(s.train.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(s.val.labels, s.test.labels[..5]);

    let tail = SplitSpec {
        train: 20,
        val: 10,
        test: 12,
        val_source: ValSource::TrainTail,
    };
    let files = cfg.mnist_files();
    let t = data::load_mnist(dir.path(), &files, &tail).unwrap();
    assert_eq!(t.val.labels, (20..30).map(|i| i % 10).collect::<Vec<_>>());
    let too_big = SplitSpec { train: 31, ..tail };
    assert!(matches!(
        data::load_mnist(dir.path(), &files, &too_big),
        Err(Error::Consistency(_))
    ));

    write_idx(&dir.path().join("my-test-lab"), vec![11], vec![0; 11]);
    assert!(matches!(experiment::load_data(&cfg), Err(Error::Consistency(_))));
}
