use std::fs;
use std::path::Path;
use std::process::Command;

use lkreg::encoder::{EncoderConfig, EncoderKind, EncoderModel};
use lkreg::geom3d::{apply, perturbation_at_angle};
use lkreg::register::LkSettings;
use lkreg::synth::meshes::Scene;
use lkreg_bench::commands::{self, cmd_gen, cmd_register, cmd_sweep, cmd_train, cmd_validate};
use lkreg_bench::config::{Method, RunConfig};
use lkreg_bench::dataset;
use lkreg_bench::metrics::{self, PairRecord};

fn small_gen(dir: &Path, scene: Scene, pairs: usize, points: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        out: dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.gen.scene = scene;
    cfg.gen.n_pairs = pairs;
    cfg.gen.pair.n_points = points;
    cfg
}

fn tiny_encoder(kind: EncoderKind, m_max: usize) -> EncoderConfig {
    EncoderConfig {
        kind,
        d_model: 8,
        n_blocks: 1,
        d_state: 4,
        k_out: 16,
        m_max,
        ..EncoderConfig::default()
    }
}

#[test]
fn rmse_and_lower_median_match_hand_values() {
    assert_eq!(metrics::rmse(&[3.0, 4.0]), (12.5f64).sqrt());
    assert_eq!(metrics::median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
    assert_eq!(metrics::median(&[5.0, 1.0, 3.0]), 3.0);
    assert_eq!(metrics::median(&[7.0]), 7.0);
    assert!(metrics::rmse(&[]).is_nan());
}

#[test]
fn config_rejects_bad_split_and_angles() {
    let mut cfg = RunConfig::default();
    assert!(cfg.validate().is_ok());
    cfg.split = 1.0;
    assert!(cfg.validate().is_err());
    cfg.split = 0.8;
    cfg.sweep.angles = vec![10.0, 180.0];
    assert!(cfg.validate().is_err());
    cfg.sweep.angles = vec![0.0, 179.0];
    assert!(cfg.validate().is_ok());
}

#[test]
fn config_file_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 42;
    cfg.sweep.methods = vec![Method::Icp];
    cfg.train.encoder.kind = EncoderKind::Mlp;
    let path = dir.path().join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    fs::write(&path, r#"{"seed": 7, "sweep": {"angles": [20, 40]}}"#).unwrap();
    let partial = RunConfig::load(&path).unwrap();
    assert_eq!(partial.seed, 7);
    assert_eq!(partial.sweep.angles, vec![20.0, 40.0]);
    assert_eq!(partial.split, 0.8);
}

#[test]
fn split_is_seeded_disjoint_and_covering() {
    let (a, b) = dataset::split_indices(50, 0.8, 3);
    assert_eq!((a.len(), b.len()), (40, 10));
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    assert_eq!(dataset::split_indices(50, 0.8, 3), (a.clone(), b));
    assert_ne!(dataset::split_indices(50, 0.8, 4).0, a);
    let (a, b) = dataset::split_indices(2, 0.99, 0);
    assert_eq!((a.len(), b.len()), (1, 1));
}

#[test]
fn gen_writes_one_directory_per_pose_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let d1 = root.path().join("a");
    let d2 = root.path().join("b");
    let m = cmd_gen(&small_gen(&d1, Scene::Sphere, 10, 128, 5)).unwrap();
    assert_eq!(m.counts.pairs, 10);
    for i in 0..10 {
        let p = d1.join(dataset::pair_name(i));
        for f in ["source.ply", "target.ply", "gt_pose.json"] {
            assert!(p.join(f).is_file(), "{}", p.join(f).display());
        }
    }
    assert!(!d1.join(dataset::pair_name(10)).exists());
    cmd_gen(&small_gen(&d2, Scene::Sphere, 10, 128, 5)).unwrap();
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&d1, "manifest.json"), read(&d2, "manifest.json"));
    assert_eq!(read(&d1, "pair_00007/source.ply"), read(&d2, "pair_00007/source.ply"));
    assert_eq!(read(&d1, "pair_00007/gt_pose.json"), read(&d2, "pair_00007/gt_pose.json"));
}

#[test]
fn generated_pairs_pass_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_gen(dir.path(), Scene::Torus, 6, 200, 1);
    cmd_gen(&cfg).unwrap();
    cfg.dataset = Some(dir.path().to_path_buf());
    let report = cmd_validate(&cfg, 1e-9).unwrap();
    assert_eq!(report.pairs, 6);
    assert_eq!(report.failures, 0, "{:?}", report.checks);
    // Corrupting a ground-truth pose is caught.
    let gt = dir.path().join("pair_00002/gt_pose.json");
    let mut pose: dataset::GtPose = serde_json::from_str(&fs::read_to_string(&gt).unwrap()).unwrap();
    pose.g_gt[0][3] += 0.01;
    fs::write(&gt, serde_json::to_string(&pose).unwrap()).unwrap();
    let report = cmd_validate(&cfg, 1e-9).unwrap();
    assert_eq!(report.failures, 1);
    assert!(!report.checks[2].ok);
}

#[test]
fn loaded_pairs_match_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_gen(dir.path(), Scene::BentTube, 3, 300, 9);
    cmd_gen(&cfg).unwrap();
    let pairs = dataset::load_dataset(dir.path()).unwrap();
    assert_eq!(pairs.len(), 3);
    let cams = Scene::BentTube.trajectory(3);
    let mesh = Scene::BentTube.mesh();
    for (i, p) in pairs.iter().enumerate() {
        let perturb = lkreg::geom3d::sample_perturbation(90.0, 0.1, lkreg::derive_seed(9, &[i as u64, 1]));
        let expect = lkreg::synth::make_pair(&mesh, &cams[i], &cfg.gen.pair, &perturb, lkreg::derive_seed(9, &[i as u64, 0])).unwrap();
        assert_eq!(p.source, expect.source);
        assert_eq!(p.target, expect.target);
        assert_eq!(p.g_gt.to_matrix4(), expect.g_gt.to_matrix4());
    }
}

#[test]
fn train_with_zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut cfg = small_gen(&data, Scene::Sphere, 4, 64, 2);
    cmd_gen(&cfg).unwrap();
    cfg.dataset = Some(data);
    cfg.out = dir.path().join("run");
    cfg.train.encoder = tiny_encoder(EncoderKind::Mamba, 64);
    cfg.train.epochs = 0;
    let out = cmd_train(&cfg, |_| {}).unwrap();
    assert!(out.epochs.is_empty());
    let saved = EncoderModel::load(&out.checkpoint).unwrap();
    let init = EncoderModel::init(cfg.train.encoder, commands::encoder_seed(cfg.seed, EncoderKind::Mamba)).unwrap();
    assert_eq!(saved.params(), init.params());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut cfg = small_gen(&data, Scene::Sphere, 200, 32, 4);
    cfg.gen.max_angle_deg = 30.0;
    cmd_gen(&cfg).unwrap();
    cfg.dataset = Some(data);
    cfg.train.encoder = tiny_encoder(EncoderKind::Mlp, 32);
    cfg.train.epochs = 50;
    cfg.train.lr = 1e-3;
    cfg.train.lk = LkSettings {
        max_iters: 3,
        ..LkSettings::default()
    };
    cfg.train.val_max_pairs = Some(8);
    let mut csvs = Vec::new();
    for run in ["r1", "r2"] {
        cfg.out = dir.path().join(run);
        let out = cmd_train(&cfg, |_| {}).unwrap();
        assert_eq!(out.epochs.len(), 50);
        let first = out.epochs[0].train_loss;
        let last = out.epochs[49].train_loss;
        assert!(last < first, "train loss {first} -> {last}");
        csvs.push(fs::read(&out.loss_csv).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.pop().unwrap()).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss\n0,,"));
    assert_eq!(text.lines().count(), 52);
}

#[test]
fn register_reports_errors_against_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = small_gen(&data, Scene::Sphere, 1, 512, 6);
    cmd_gen(&cfg).unwrap();
    let pair = dataset::load_pair(&data, "pair_00000").unwrap();

    // Identical files: ICP stays at the identity.
    let t = data.join("pair_00000/target.ply");
    let same = cmd_register(&cfg, Method::Icp, None, &t, &t, None).unwrap();
    assert!(same.rotation_error_deg.is_none());
    let g = dataset::pose_from_rows(&same.pose).unwrap();
    assert!(g.angle().to_degrees() < 1e-6);

    // Small perturbation with a known pose.
    let perturb = perturbation_at_angle(5.0, 0.02, 11);
    let src = dir.path().join("src.ply");
    lkreg::cloud::write_ply(&src, &apply(&perturb, &pair.target)).unwrap();
    let gt = dir.path().join("gt.json");
    fs::write(&gt, serde_json::to_string(&dataset::pose_rows(&perturb.inverse())).unwrap()).unwrap();
    let r = cmd_register(&cfg, Method::Icp, None, &src, &t, Some(&gt)).unwrap();
    assert!(r.converged);
    assert!(r.rotation_error_deg.unwrap() < 0.5, "{:?}", r.rotation_error_deg);
    assert!(r.translation_error.unwrap() < 0.01);
    assert!(r.cd_after <= r.cd_before);
    assert!(r.hd_after <= r.hd_before);

    // gt_pose.json files are accepted as ground truth too.
    let gt_file = data.join("pair_00000/gt_pose.json");
    let s = data.join("pair_00000/source.ply");
    let r = cmd_register(&cfg, Method::Icp, None, &s, &t, Some(&gt_file)).unwrap();
    assert!(r.rotation_error_deg.is_some());

    // IC-LK without a checkpoint is a configuration error.
    assert!(cmd_register(&cfg, Method::IclkMamba, None, &s, &t, None).is_err());
}

#[test]
fn register_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let model = EncoderModel::init(tiny_encoder(EncoderKind::Mlp, 64), 0).unwrap();
    let ckpt = dir.path().join("m.json");
    model.save(&ckpt).unwrap();
    let data = dir.path().join("data");
    let cfg = small_gen(&data, Scene::Sphere, 1, 64, 0);
    cmd_gen(&cfg).unwrap();
    let t = data.join("pair_00000/target.ply");
    let err = cmd_register(&cfg, Method::IclkMamba, Some(&ckpt), &t, &t, None).unwrap_err();
    assert!(err.to_string().contains("needs"), "{err}");
    assert!(cmd_register(&cfg, Method::IclkMlp, Some(&ckpt), &t, &t, None).is_ok());
}

fn sweep_cfg(root: &Path, scene: Scene, pairs: usize, points: usize) -> RunConfig {
    let data = root.join("data");
    let mut cfg = small_gen(&data, scene, pairs, points, 8);
    cmd_gen(&cfg).unwrap();
    cfg.dataset = Some(data);
    cfg.out = root.join("sweep");
    cfg.sweep.methods = vec![Method::Icp];
    cfg.sweep.timing = false;
    cfg
}

#[test]
fn sweep_at_zero_degrees_leaves_icp_aligned() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sweep_cfg(dir.path(), Scene::Sphere, 10, 128);
    cfg.sweep.angles = vec![0.0];
    cfg.sweep.max_trans = 0.0;
    let out = cmd_sweep(&cfg).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].n_pairs, 2);
    assert!(out.rows[0].rot_rmse_deg < 1e-6, "{:?}", out.rows[0]);
    assert!(out.rows[0].trans_rmse < 1e-9, "{:?}", out.rows[0]);
}

#[test]
fn sweep_outputs_are_a_pure_aggregation_of_pair_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sweep_cfg(dir.path(), Scene::Sphere, 15, 128);
    let model = EncoderModel::init(tiny_encoder(EncoderKind::Mlp, 128), 1).unwrap();
    let ckpt = dir.path().join("mlp.json");
    model.save(&ckpt).unwrap();
    cfg.sweep.methods = vec![Method::Icp, Method::IclkMlp];
    cfg.sweep.mlp_checkpoint = Some(ckpt);
    cfg.sweep.angles = vec![0.0, 30.0, 60.0];
    cfg.extended = true;
    let out = cmd_sweep(&cfg).unwrap();
    assert_eq!(out.rows.len(), 2 * 3);

    let csv = fs::read_to_string(&out.csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,angle_deg,rot_rmse_deg,rot_median_deg,trans_rmse,trans_median,cd_mean,hd_mean,n_pairs,mean_ms,rot_mean_deg,trans_mean"
    );
    assert_eq!(lines.count(), 6);

    let records = metrics::read_jsonl(&out.jsonl).unwrap();
    assert_eq!(records, out.records);
    assert_eq!(records.len(), 2 * 3 * 3);
    let again = metrics::aggregate(&records, &cfg.sweep.methods, &cfg.sweep.angles);
    assert_eq!(metrics::csv_string(&again, true).unwrap(), csv);

    // Both methods saw the same starting poses.
    let starts = |m: Method| -> Vec<(String, u64)> {
        records.iter().filter(|r| r.method == m).map(|r| (r.pair.clone(), r.angle_deg.to_bits())).collect()
    };
    assert_eq!(starts(Method::Icp), starts(Method::IclkMlp));
    let md = fs::read_to_string(&out.markdown).unwrap();
    assert!(md.contains("| iclk-mlp |"));
}

#[test]
fn sweep_is_reproducible_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sweep_cfg(dir.path(), Scene::BentTube, 10, 256);
    cfg.sweep.angles = vec![10.0, 45.0];
    let a = fs::read(cmd_sweep(&cfg).unwrap().csv).unwrap();
    cfg.threads = Some(3);
    let b = fs::read(cmd_sweep(&cfg).unwrap().csv).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with(
        "method,angle_deg,rot_rmse_deg,rot_median_deg,trans_rmse,trans_median,cd_mean,hd_mean,n_pairs,mean_ms\n"
    ));
}

#[test]
fn icp_degrades_with_angle_on_tubes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sweep_cfg(dir.path(), Scene::BentTube, 40, 256);
    cfg.sweep.angles = vec![20.0, 80.0];
    let out = cmd_sweep(&cfg).unwrap();
    assert!(out.rows[1].cd_mean > out.rows[0].cd_mean, "{:?}", out.rows);
}

#[test]
fn failed_registrations_are_recorded_not_fatal() {
    let rec = PairRecord {
        method: Method::Icp,
        angle_deg: 10.0,
        pair: "pair_00000".into(),
        rot_err_deg: 10.0,
        trans_err: 0.0,
        cd: 0.1,
        hd: 0.2,
        iterations: 0,
        converged: false,
        wall_ms: 0.0,
        error: Some("degenerate".into()),
    };
    let rows = metrics::aggregate(&[rec.clone(), rec], &[Method::Icp], &[10.0]);
    assert_eq!(rows[0].n_pairs, 2);
    assert_eq!(rows[0].rot_median_deg, 10.0);
}

fn lkreg_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lkreg"))
}

#[test]
fn cli_gen_validate_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = |args: &[&str]| {
        let out = lkreg_bin().args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    let d = data.to_str().unwrap();
    run(&["--seed", "3", "--out", d, "gen", "--scene", "sphere", "--pairs", "5", "--points", "100"]);
    let v = run(&["validate", "--dataset", d]);
    assert!(String::from_utf8_lossy(&v.stdout).contains("5 pairs checked, 0 failed"));

    let s = dir.path().join("sweep");
    let s = s.to_str().unwrap();
    run(&[
        "--seed", "3", "--out", s, "--threads", "2", "sweep", "--dataset", d, "--methods", "icp", "--angles", "0,20", "--no-timing",
    ]);
    let csv = fs::read_to_string(dir.path().join("sweep/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("icp,0,"));
    assert!(dir.path().join("sweep/results.md").is_file());
    assert!(dir.path().join("sweep/pairs.jsonl").is_file());

    let reg = run(&[
        "register",
        "--source",
        &format!("{d}/pair_00000/source.ply"),
        "--target",
        &format!("{d}/pair_00000/target.ply"),
        "--gt",
        &format!("{d}/pair_00000/gt_pose.json"),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&reg.stdout).unwrap();
    assert!(report["rotation_error_deg"].is_number());
    assert_eq!(report["pose"].as_array().unwrap().len(), 4);

    let bad = lkreg_bin().args(["sweep", "--dataset", d, "--angles", "200"]).output().unwrap();
    assert!(!bad.status.success());
    let bad = lkreg_bin().args(["validate", "--dataset", dir.path().join("missing").to_str().unwrap()]).output().unwrap();
    assert!(!bad.status.success());
}
