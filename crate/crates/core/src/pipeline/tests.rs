use std::sync::OnceLock;

use super::*;
use crate::body_model::mini;
use crate::fitting::build_ratio_table;
use crate::labelgen::sha256_hex;

fn table() -> &'static RatioTable {
    static T: OnceLock<RatioTable> = OnceLock::new();
    T.get_or_init(|| build_ratio_table(mini(), 400, 3).unwrap())
}

fn quick_config() -> FitConfig {
    FitConfig { use_silhouette: false, ..FitConfig::default() }
}

fn dataset(n: usize, seed: u64) -> (tempfile::TempDir, PathBuf, Vec<SyntheticSample>) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDataset { n, seed, ..SyntheticDataset::default() };
    let (path, samples) = write_synthetic_dataset(dir.path(), mini(), &spec).unwrap();
    (dir, path, samples)
}

fn job(cfg: &FitConfig) -> FitJob<'_> {
    FitJob { model: mini(), config: cfg, table: table(), jobs: Some(1) }
}

#[test]
fn fit_writes_one_fit_per_sample_and_skips_unchanged_inputs() {
    let (_dir, path, _) = dataset(10, 1);
    let cfg = quick_config();
    let r = cmd_fit(&path, &job(&cfg)).unwrap();
    assert_eq!(r.fitted.len(), 10);
    assert!(r.errors.is_empty() && r.manifest_written);
    let m = DatasetManifest::load(&path).unwrap();
    for s in &m.samples {
        let id = s.fit.as_ref().unwrap();
        assert_eq!(&sha256_hex(&std::fs::read(m.fit_path(id)).unwrap()), id);
        assert_eq!(s.status, Status::Unreviewed);
    }
    let before = sha256_hex(&std::fs::read(&path).unwrap());
    let again = cmd_fit(&path, &job(&cfg)).unwrap();
    assert_eq!((again.fitted.len(), again.skipped.len()), (0, 10));
    assert!(!again.manifest_written);
    assert_eq!(sha256_hex(&std::fs::read(&path).unwrap()), before);
}

#[test]
fn a_corrupt_keypoint_file_is_recorded_and_the_run_continues() {
    let (dir, path, _) = dataset(10, 2);
    std::fs::write(dir.path().join("kp/s0003.txt"), "skeleton 9\nnot numbers\n").unwrap();
    let cfg = quick_config();
    let r = cmd_fit(&path, &job(&cfg)).unwrap();
    assert_eq!(r.fitted.len(), 9);
    assert_eq!(r.errors.len(), 1);
    assert_eq!(r.errors[0].id, "s0003");
    let m = DatasetManifest::load(&path).unwrap();
    let bad = m.sample("s0003").unwrap();
    assert!(bad.error.is_some() && bad.fit.is_none());
}

#[test]
fn accepted_samples_are_not_refitted() {
    let (_dir, path, _) = dataset(3, 3);
    let cfg = quick_config();
    cmd_fit(&path, &job(&cfg)).unwrap();
    let mut m = DatasetManifest::load(&path).unwrap();
    m.samples[0].status = Status::Accepted;
    m.save(&path).unwrap();
    let other = FitConfig { sigma: 50.0, ..quick_config() };
    let r = cmd_fit(&path, &job(&other)).unwrap();
    assert_eq!(r.accepted, vec!["s0000".to_string()]);
    assert_eq!(r.fitted.len(), 2);
    let after = DatasetManifest::load(&path).unwrap();
    assert_eq!(after.samples[0], m.samples[0]);
}

#[test]
fn manifest_validation() {
    let cam = crate::render::Camera::centered(500.0, 64, 64);
    let mut m = DatasetManifest::new(cam, ".");
    m.samples.push(Sample { id: "a".into(), keypoints: "a.txt".into(), ..Sample::default() });
    m.samples.push(Sample { id: "a".into(), keypoints: "b.txt".into(), ..Sample::default() });
    assert!(DatasetManifest::from_json(&m.to_json(), ".").is_err());
    m.samples[1].id = "../b".into();
    assert!(DatasetManifest::from_json(&m.to_json(), ".").is_err());
    m.samples[1].id = "b".into();
    let parsed = DatasetManifest::from_json(&m.to_json(), "somewhere").unwrap();
    assert_eq!(parsed.samples, m.samples);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, m.to_json()).unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(PipelineError::Manifest(_))));
}

#[test]
fn exported_subsets_resolve_from_anywhere() {
    let (_dir, path, _) = dataset(3, 4);
    let mut m = DatasetManifest::load(&path).unwrap();
    m.samples[1].status = Status::Accepted;
    let sub = m.subset(Status::Accepted);
    let other = tempfile::tempdir().unwrap();
    let p = other.path().join("export.json");
    sub.save(&p).unwrap();
    let loaded = DatasetManifest::load(&p).unwrap();
    assert_eq!(loaded.samples.len(), 1);
    assert_eq!(loaded.samples[0].id, "s0001");
}

fn corrupt(fit: &FitResult) -> FitResult {
    // swing both arms and shrink the body
    let mut bad = fit.clone();
    for j in [2, 4] {
        bad.pose[3 * j + 2] += 1.2;
    }
    bad.shape[1] -= 2.0;
    bad
}

#[test]
fn loop_refits_rejected_samples_and_keeps_their_history() {
    let (_dir, path, truths) = dataset(4, 5);
    let mut m = DatasetManifest::load(&path).unwrap();
    for (i, t) in truths.iter().enumerate() {
        m.samples[i].fit = Some(m.store_fit(&corrupt(&t.truth)).unwrap());
    }
    m.samples[0].status = Status::Rejected;
    m.samples[1].status = Status::Rejected;
    m.samples[2].status = Status::Accepted;
    m.samples[3].status = Status::Rejected;
    m.samples[3].predicted_landmarks = None;
    m.save(&path).unwrap();

    let cfg = FitConfig::default();
    let map = PartReductionMap::mini();
    let r = cmd_loop_iterate(&path, &job(&cfg), &map).unwrap();
    assert_eq!(r.missing_predictions, vec!["s0003".to_string()]);
    assert!(r.errors.is_empty());
    assert_eq!(r.rows.len(), 2);
    let after = DatasetManifest::load(&path).unwrap();
    for (row, i) in r.rows.iter().zip([0, 1]) {
        let s = &after.samples[i];
        assert_eq!(s.status, Status::Unreviewed);
        assert_eq!(s.previous_fits, vec![m.samples[i].fit.clone().unwrap()]);
        assert_eq!(s.fit.as_deref(), Some(row.fit_after.as_str()));
        assert!(after.fit_path(&row.fit_before).is_file() && after.fit_path(&row.fit_after).is_file());
        // oracle: scores recomputed from the stored fits
        let gt = read_mask_png(&after.resolve(s.gt_parts.as_ref().unwrap())).unwrap();
        for (fit, reported) in [(&row.fit_before, row.f1_before), (&row.fit_after, row.f1_after)] {
            let pred = render_reduced(mini(), &after.load_fit(fit).unwrap(), &after.camera, &map).unwrap();
            assert_eq!(Some(seg_scores(&pred, &gt, None).unwrap().macro_f1), reported);
        }
        assert!(row.f1_delta.unwrap() > 0.0, "{row:?}");
    }
    assert_eq!(after.samples[2], m.samples[2]);
    assert_eq!(after.samples[3].status, Status::Rejected);
    // nothing left to refit
    let again = cmd_loop_iterate(&path, &job(&cfg), &map).unwrap();
    assert!(again.rows.is_empty() && !again.manifest_written);
}

#[test]
fn labelgen_writes_bundles_once() {
    let (dir, path, truths) = dataset(3, 6);
    let mut m = DatasetManifest::load(&path).unwrap();
    for (i, t) in truths.iter().enumerate().take(2) {
        m.samples[i].fit = Some(m.store_fit(&t.truth).unwrap());
    }
    m.samples[1].status = Status::Accepted;
    m.save(&path).unwrap();
    let out = dir.path().join("labels");
    let map = PartReductionMap::mini();
    let r = cmd_labelgen(&path, mini(), &map, &out, None, Some(1)).unwrap();
    assert_eq!(r.written, vec!["s0000".to_string(), "s0001".to_string()]);
    assert_eq!(r.skipped, vec!["s0002".to_string()]);
    let gt = read_mask_png(&dir.path().join("gt/s0000.parts6.png")).unwrap();
    assert_eq!(read_mask_png(&out.join("s0000/parts6.png")).unwrap(), gt);
    let again = cmd_labelgen(&path, mini(), &map, &out, None, Some(1)).unwrap();
    assert!(again.written.is_empty() && again.unchanged.len() == 2);
    let accepted = cmd_labelgen(&path, mini(), &map, &dir.path().join("acc"), Some(Status::Accepted), None).unwrap();
    assert_eq!(accepted.written, vec!["s0001".to_string()]);
}

#[test]
fn eval_of_true_fits_is_perfect() {
    let (_dir, path, truths) = dataset(3, 7);
    let mut m = DatasetManifest::load(&path).unwrap();
    for (i, t) in truths.iter().enumerate() {
        m.samples[i].fit = Some(m.store_fit(&t.truth).unwrap());
    }
    m.save(&path).unwrap();
    let r = cmd_eval(&path, mini(), &PartReductionMap::mini(), &EvalOptions::default(), None).unwrap();
    assert!(r.errors.is_empty());
    assert_eq!(r.summary.n_samples, 3);
    assert_eq!(r.summary.pck, Some(1.0));
    assert_eq!(r.summary.part_f1, Some(1.0));
    assert_eq!(r.summary.fb_accuracy, Some(1.0));
    assert!(r.summary.joint_error_mm.unwrap() < 1e-9);
    assert!(r.to_table().lines().count() == 5);
}

#[test]
fn dp_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DpTrainConfig {
        n_poses: 30,
        elevations: 1,
        azimuths: 8,
        forest: crate::direct_predict::ForestParams { n_trees: 4, ..Default::default() },
        ..DpTrainConfig::default()
    };
    let model_path = dir.path().join("dp.bin");
    let (dp, report) = cmd_dp_train(mini(), &cfg, 5, &model_path, Some(1)).unwrap();
    assert_eq!(report.rows + report.dropped, 240);
    assert_eq!(crate::direct_predict::load_dp_model(&model_path).unwrap(), dp);
    let (_d, path, _) = dataset(2, 8);
    let out = dir.path().join("pred");
    let r = cmd_dp_predict(&path, mini(), &dp, &out, 5, None).unwrap();
    assert_eq!(r.written.len(), 2);
    assert!(r.errors.is_empty());
    let fit: FitResult = serde_json::from_slice(&std::fs::read(out.join("s0000.json")).unwrap()).unwrap();
    assert!(fit.is_finite());
    assert_eq!(fit.keypoint_set, mini().surface_set_name());
}
