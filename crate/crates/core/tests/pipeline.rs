use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cacp_core::dataset::{load_dataset, Manifest, Task, MANIFEST_FILE, PROVENANCE_FILE};
use cacp_core::gallery::{GalleryIndex, RatioTable};
use cacp_core::pipeline::{run_augment, run_build_gallery, run_evaluate, run_preview, RunConfig};
use cacp_core::synth::{write_base_dataset, write_gallery};
use cacp_core::Error;

const CATEGORIES: [&str; 3] = ["cat", "dog", "car"];

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(task: Task, n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        write_gallery(&root.join("gallery"), &CATEGORIES, 3, 40, 11).unwrap();
        write_base_dataset(&root.join("source"), task, n, &CATEGORIES, 64, 48, 5).unwrap();
        Fixture { _dir: dir, root }
    }

    fn config(&self, task: Task, out: &str) -> RunConfig {
        RunConfig::new(
            task,
            &self.root.join("source"),
            &self.root.join("gallery"),
            &self.root.join(out),
        )
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (ta, tb) = (tree(a), tree(b));
    let differing: Vec<&String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .collect();
    assert!(differing.is_empty(), "trees differ at {differing:?}");
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn half_fraction_counts_and_determinism() {
    let fx = Fixture::new(Task::Detection, 20);
    let mut config = fx.config(Task::Detection, "out_a");
    config.fraction = "1/2".parse().unwrap();
    config.seed = 42;
    let report = run_augment(&config).unwrap();
    assert_eq!(report.images_processed, 20);
    assert_eq!(report.images_augmented, 10);
    assert_eq!(report.images_passed_through, 10);
    assert_eq!(report.donors_skipped, 0);

    let out = fx.root.join("out_a");
    let manifest = Manifest::read(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.len(), 20);
    assert_eq!(line_count(&out.join(PROVENANCE_FILE)), 10);
    let aug = manifest
        .rows
        .iter()
        .filter(|r| r.relative_path.contains("_aug"))
        .count();
    assert_eq!(aug, 10);

    config.output_dir = Some(fx.root.join("out_b"));
    run_augment(&config).unwrap();
    assert_same_tree(&out, &fx.root.join("out_b"));

    // Output reloads as a detection dataset.
    assert_eq!(load_dataset(&out, Task::Detection).unwrap().len(), 20);
}

#[test]
fn variants_multiply_outputs() {
    let fx = Fixture::new(Task::Detection, 4);
    let mut config = fx.config(Task::Detection, "out");
    config.variants_per_image = 3;
    let report = run_augment(&config).unwrap();
    assert_eq!(report.outputs_written, 12);
    let manifest = Manifest::read(&fx.root.join("out").join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.len(), 12);
    assert_eq!(line_count(&fx.root.join("out").join(PROVENANCE_FILE)), 12);
}

#[test]
fn segmentation_and_classification_runs() {
    for task in [Task::Segmentation, Task::Classification] {
        let fx = Fixture::new(task, 6);
        let config = fx.config(task, "out");
        let report = run_augment(&config).unwrap();
        assert_eq!(report.images_augmented, 6, "{task}");
        let items = load_dataset(&fx.root.join("out"), task).unwrap();
        assert_eq!(items.len(), 6);
        if task == Task::Segmentation {
            // Every gallery category is in the class map.
            let names: Vec<&String> = items[0].annotations.class_map.values().collect();
            for c in CATEGORIES {
                assert!(names.iter().any(|n| *n == c));
            }
        }
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let fx = Fixture::new(Task::Detection, 8);
    let mut config = fx.config(Task::Detection, "full");
    config.fraction = "1/2".parse().unwrap();
    run_augment(&config).unwrap();

    // Interrupted after three base images, then a torn write of the fourth.
    config.output_dir = Some(fx.root.join("partial"));
    config.stop_after = Some(3);
    let first = run_augment(&config).unwrap();
    assert_eq!(first.images_processed, 3);
    let partial = fx.root.join("partial");
    assert_eq!(line_count(&partial.join(MANIFEST_FILE)), 3);
    assert!(!partial.join("annotations.json").exists());
    let mut manifest = fs::read_to_string(partial.join(MANIFEST_FILE)).unwrap();
    manifest.push_str("images/img_003.png\tdead");
    fs::write(partial.join(MANIFEST_FILE), manifest).unwrap();
    fs::write(partial.join("images/img_003.png.tmp"), b"torn").unwrap();

    config.stop_after = None;
    config.resume = true;
    let second = run_augment(&config).unwrap();
    assert_eq!(second.images_resumed, 3);
    assert_eq!(second.images_processed, 5);
    assert_same_tree(&fx.root.join("full"), &partial);

    // Resuming a finished run is a no-op.
    run_augment(&config).unwrap();
    assert_same_tree(&fx.root.join("full"), &partial);
}

#[test]
fn refuses_non_empty_output_without_resume() {
    let fx = Fixture::new(Task::Detection, 2);
    let config = fx.config(Task::Detection, "out");
    run_augment(&config).unwrap();
    let err = run_augment(&config).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn build_gallery_writes_and_is_idempotent() {
    let fx = Fixture::new(Task::Detection, 1);
    let config = fx.config(Task::Detection, "out");
    let (index_path, ratio_path) = run_build_gallery(&config).unwrap();
    let first = (
        fs::read(&index_path).unwrap(),
        fs::read(&ratio_path).unwrap(),
    );
    run_build_gallery(&config).unwrap();
    assert_eq!(
        first,
        (
            fs::read(&index_path).unwrap(),
            fs::read(&ratio_path).unwrap()
        )
    );
    let index = GalleryIndex::read_cache(&index_path, &fx.root.join("gallery")).unwrap();
    assert_eq!(index.categories().len(), 3);
    let table = RatioTable::read_tsv(&ratio_path).unwrap();
    assert!(!table.is_empty());
}

#[test]
fn empty_gallery_is_config_class_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("gallery/empty")).unwrap();
    let config = RunConfig::new(
        Task::Detection,
        dir.path(),
        &dir.path().join("gallery"),
        &dir.path().join("o"),
    );
    let err = run_build_gallery(&config).unwrap_err();
    assert!(matches!(err, Error::EmptyGallery(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn preview_matches_augment_output() {
    let fx = Fixture::new(Task::Detection, 3);
    let mut config = fx.config(Task::Detection, "aug");
    config.seed = 9;
    run_augment(&config).unwrap();

    config.output_dir = Some(fx.root.join("preview"));
    let base = fx.root.join("source/images/img_001.png");
    let out = run_preview(&config, &base).unwrap();
    let composite = fs::read(out.composite_path.unwrap()).unwrap();
    let name = out.augment_name.unwrap();
    assert_eq!(
        composite,
        fs::read(fx.root.join("aug/images").join(name)).unwrap()
    );

    let ranking = fs::read_to_string(out.ranking_path).unwrap();
    let mut listed: Vec<&str> = ranking
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    listed.sort();
    let mut expected = CATEGORIES.to_vec();
    expected.sort();
    assert_eq!(listed, expected);
}

#[test]
fn evaluate_identical_sets() {
    let fx = Fixture::new(Task::Segmentation, 3);
    let src = fx.root.join("source");
    let report = run_evaluate(&src, &src, Task::Segmentation).unwrap();
    assert_eq!(report.get("miou", "all"), Some(1.0));

    let fx = Fixture::new(Task::Detection, 3);
    let src = fx.root.join("source");
    let report = run_evaluate(&src, &src, Task::Detection).unwrap();
    assert_eq!(report.get("map50", "all"), Some(1.0));
}

#[test]
fn evaluate_empty_predictions_and_mismatch() {
    let fx = Fixture::new(Task::Detection, 3);
    let pred = fx.root.join("pred");
    fs::create_dir_all(&pred).unwrap();
    fs::write(
        pred.join("annotations.json"),
        r#"{"images":[],"annotations":[],"categories":[]}"#,
    )
    .unwrap();
    let report = run_evaluate(&pred, &fx.root.join("source"), Task::Detection).unwrap();
    assert_eq!(report.get("map50", "all"), Some(0.0));

    fs::write(
        pred.join("annotations.json"),
        r#"{"images":[{"id":1,"file_name":"zzz.png","width":4,"height":4}],"annotations":[],"categories":[]}"#,
    )
    .unwrap();
    let err = run_evaluate(&pred, &fx.root.join("source"), Task::Detection).unwrap_err();
    assert!(matches!(err, Error::LayoutMismatch(_)));
    assert_eq!(err.exit_code(), 2);
}
