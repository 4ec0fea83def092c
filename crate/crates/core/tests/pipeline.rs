use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use heartscreen::pipeline::stages::{cmd_prepare, cmd_score, cmd_train, cmd_tune, SPLIT_PATH, TRAIN_PATH};
use heartscreen::pipeline::{run_all, PipelineConfig, RunReport};
use heartscreen::Error;

/// Small, fast configuration: a few thousand rows, reduced network.
fn small(out: &Path) -> PipelineConfig {
    let text = r#"
        seed = 5
        [synth]
        rows = 3000
        [cv]
        folds = 3
        max_rows = 900
        cnn_epochs = 2
        [models.cnn]
        reduced = true
        [models.cnn.train]
        epochs = 4
        [ensemble]
        member_threshold = 0.6
        [evaluation]
        bootstrap_iterations = 100
    "#;
    let mut c = PipelineConfig::from_toml(text).unwrap();
    c.out = out.to_path_buf();
    c
}

struct Shared {
    _dir: tempfile::TempDir,
    config: PipelineConfig,
    report: RunReport,
}

fn shared() -> &'static Shared {
    static RUN: OnceLock<Shared> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small(&dir.path().join("run"));
        let report = run_all(&config).unwrap();
        config.data = Some(config.out.join("data/synthetic.csv"));
        Shared {
            _dir: dir,
            config,
            report,
        }
    })
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            fs::copy(e.path(), target).unwrap();
        }
    }
}

#[test]
fn report_covers_every_model() {
    let r = &shared().report;
    let names: Vec<_> = r.models.iter().map(|m| m.name.as_str()).collect();
    assert_eq!(names, ["logistic", "random_forest", "gbm_depthwise", "gbm_leafwise", "cnn", "ensemble"]);
    assert_eq!(r.schema_version, 1);
    assert_eq!(r.dataset.full.rows, 3000);
    assert!(r.models.iter().all(|m| m.test_auc > 0.5));
    let best_member = r
        .ensemble
        .candidate_aucs
        .iter()
        .filter(|(n, _)| r.ensemble.members.contains(n))
        .map(|c| c.1)
        .fold(0.0, f64::max);
    assert!(r.ensemble.validation_auc >= best_member);
    assert_eq!(r.explanation.additivity_violations, 0);
    assert!(r.surrogate.scaled_features);
    assert!(r.surrogate.depth <= 4);
}

#[test]
fn stale_inputs_are_refused() {
    let s = shared();
    let dir = tempfile::tempdir().unwrap();
    let mut config = s.config.clone();
    config.out = dir.path().join("copy");
    copy_dir(&s.config.out, &config.out);

    let path = config.out.join(TRAIN_PATH);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push('\n');
    fs::write(&path, text).unwrap();
    assert!(matches!(cmd_train(&config), Err(Error::HashMismatch(p)) if p == path));

    fs::copy(s.config.out.join(TRAIN_PATH), &path).unwrap();
    fs::remove_file(config.out.join("manifests/train.json")).unwrap();
    assert!(matches!(cmd_tune(&config), Err(Error::MissingArtifact(_))));
}

#[test]
fn prepare_is_idempotent() {
    let s = shared();
    let dir = tempfile::tempdir().unwrap();
    let mut config = s.config.clone();
    config.out = dir.path().to_path_buf();
    cmd_prepare(&config).unwrap();
    let a = fs::read(config.out.join(SPLIT_PATH)).unwrap();
    let b = fs::read(s.config.out.join(SPLIT_PATH)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn score_reproduces_test_predictions() {
    let s = shared();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scored.csv");
    let scored = cmd_score(&s.config, s.config.data.as_ref().unwrap(), &out).unwrap();
    let test = heartscreen::pipeline::ScoreTable::from_csv(&fs::read_to_string(s.config.out.join("scores/test.csv")).unwrap())
        .unwrap();
    let ens = scored.get("ensemble").unwrap();
    for (i, &row) in test.rows.iter().enumerate() {
        assert_eq!(ens[row], test.get("ensemble").unwrap()[i]);
    }
}

#[test]
fn missing_data_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.data = Some(dir.path().join("nope.csv"));
    assert!(matches!(cmd_prepare(&config), Err(Error::MissingArtifact(_))));
}
