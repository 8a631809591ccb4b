use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use neumat::datagen::dataset::{HEADER_BYTES, RECORD_BYTES};
use neumat::image::{read_png_channels, Image};

fn neumat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neumat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = neumat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    neumat(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small flat dataset and a material trained on it, shared by the tests.
struct Fixture {
    dir: tempfile::TempDir,
    dataset: PathBuf,
    material: PathBuf,
    train_stdout: String,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let dataset = dir.path().join("flat.mbtfq");
        let material = dir.path().join("flat.neumat");
        ok(&[
            "generate", "--preset", "flat", "--k", "3", "--per-texel", "256", "--samples", "1", "--light-cone", "0",
            "--seed", "1", "-o", s(&dataset),
        ]);
        let train_stdout = ok(&[
            "train",
            s(&dataset),
            "-o",
            s(&material),
            "--iters",
            "1500",
            "--batch",
            "1024",
            "--half-life",
            "50",
            "--threads",
            "1",
        ]);
        Fixture {
            dir,
            dataset,
            material,
            train_stdout,
        }
    })
}

fn scene_file(dir: &Path, name: &str, material: Option<&Path>) -> PathBuf {
    let mut text = String::from(
        "camera.position = 0.5 -0.6 1.2\ncamera.look_at = 0.5 0.5 0\ncamera.width = 48\ncamera.height = 32\nlight.direction = 0.2 0.1 1\n",
    );
    if let Some(m) = material {
        text.push_str(&format!("material = {}\n", m.display()));
    }
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn parse_after(text: &str, label: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(label)).unwrap_or_else(|| panic!("no `{label}` in {text}"));
    line[label.len()..].split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn generate_writes_expected_record_count_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mbtfq");
    let b = dir.path().join("b.mbtfq");
    for p in [&a, &b] {
        let out = ok(&["generate", "--preset", "flat", "--k", "4", "--per-texel", "256", "--seed", "1", "-o", s(p), "--threads", "1"]);
        assert!(out.contains("65536 records"), "{out}");
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes.len(), HEADER_BYTES + 65536 * RECORD_BYTES);
    assert_eq!(bytes, std::fs::read(&b).unwrap());
}

#[test]
fn per_texel_outside_recommended_range_warns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.mbtfq");
    let out = neumat(&["generate", "--preset", "flat", "--k", "2", "--per-texel", "64", "--samples", "1", "-o", s(&p)]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warning") && err.contains("200-400"), "{err}");
    let out = neumat(&[
        "generate", "--preset", "flat", "--k", "2", "--per-texel", "64", "--samples", "1", "--force", "-o", s(&p),
    ]);
    assert!(out.status.success());
    assert!(out.stderr.is_empty());
}

#[test]
fn bad_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.mbtfq");
    assert_eq!(code(&["generate", "--heights", "/nonexistent/h.png", "-o", s(&out)]), 2);
    assert_eq!(code(&["generate", "--preset", "mountains", "-o", s(&out)]), 2);
    assert_eq!(code(&["generate", "-o", s(&out)]), 2);
    assert_eq!(code(&["generate", "--preset", "flat", "--bogus-flag", "-o", s(&out)]), 2);
    assert_eq!(code(&["generate", "--preset", "flat", "-o", "/nonexistent/dir/x.mbtfq"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    // a non-PNG height map
    let fake = dir.path().join("h.png");
    std::fs::write(&fake, b"not a png").unwrap();
    assert_eq!(code(&["generate", "--heights", s(&fake), "-o", s(&out)]), 2);
}

#[test]
fn help_documents_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        (
            "generate",
            &["--preset", "--heights", "--albedo", "--height-scale", "--hf-resolution", "--k", "--per-texel", "--samples", "--seed", "--light-cone", "--indirect", "--force", "--output", "--threads", "--deterministic", "--config"],
        ),
        (
            "train",
            &["--output", "--iters", "--batch", "--lr", "--channels", "--offset-channels", "--blur-sigma", "--half-life", "--seed", "--baseline", "--loss-log", "--checkpoint-every"],
        ),
        (
            "render",
            &["--scene", "--material", "--output", "--reference", "--ref-samples", "--light-cone", "--lod-sweep", "--spp", "--seed", "--batch"],
        ),
        (
            "eval",
            &["--material", "--dataset", "--levels", "--lod-resolution", "--directions", "--ref-samples", "--csv"],
        ),
        ("inspect", &["--offset-vis", "--offset-scale", "--vis-prefix"]),
    ];
    for (cmd, flags) in cases {
        let help = ok(&[cmd, "--help"]);
        for f in *flags {
            assert!(help.contains(f), "`{cmd} --help` lacks {f}");
        }
    }
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    std::fs::write(&cfg, "preset = flat\nk = 2\nper_texel = 300\nsamples = 1\n").unwrap();
    let out_path = dir.path().join("c.mbtfq");
    let out = ok(&["generate", "--config", s(&cfg), "--per-texel", "200", "-o", s(&out_path)]);
    assert!(out.contains(&format!("{} records", 16 * 200)), "{out}");
    std::fs::write(&cfg, "preset = flat\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&["generate", "--config", s(&cfg), "-o", s(&out_path)]), 2);
}

#[test]
fn zero_iterations_writes_initialized_material() {
    let f = fixture();
    let m = f.dir.path().join("init.neumat");
    ok(&["train", s(&f.dataset), "-o", s(&m), "--iters", "0"]);
    let inspect = ok(&["inspect", s(&m)]);
    assert!(inspect.contains("parameters: decoder=1678 offset=1576"), "{inspect}");
    assert!(inspect.contains("k: 3  channels: 7  offset channels: 7  offset module: yes"), "{inspect}");
    assert!(inspect.contains("trained iterations: 0"));
    assert!(inspect.contains("texture channels per texel: 14"));
}

#[test]
fn baseline_material_has_no_offset_module() {
    let f = fixture();
    let m = f.dir.path().join("base.neumat");
    ok(&["train", s(&f.dataset), "-o", s(&m), "--iters", "0", "--baseline", "--channels", "5"]);
    let inspect = ok(&["inspect", s(&m)]);
    assert!(inspect.contains("offset module: no"), "{inspect}");
    assert!(inspect.contains("channels: 5"));
    assert!(inspect.contains("offset=0"));
    assert_eq!(code(&["inspect", s(&m), "--offset-vis", "0.3,0.2"]), 2);
}

#[test]
fn eval_on_training_set_reproduces_final_loss() {
    let f = fixture();
    let trained = parse_after(&f.train_stdout, "final dataset mse:");
    let out = ok(&["eval", "--material", s(&f.material), "--dataset", s(&f.dataset)]);
    let evaluated = parse_after(&out, "dataset mse:");
    assert!((trained - evaluated).abs() <= 1e-6, "{trained} vs {evaluated}");
    assert!(trained < 1e-3, "flat training did not converge: {trained}");
}

#[test]
fn eval_table_has_one_row_per_level_and_csv() {
    let f = fixture();
    let csv = f.dir.path().join("lod.csv");
    let out = ok(&[
        "eval", "--material", s(&f.material), "--preset", "flat", "--levels", "0,2,3", "--lod-resolution", "4",
        "--directions", "2", "--ref-samples", "2", "--csv", s(&csv),
    ]);
    let rows = out.lines().filter(|l| l.trim_start().chars().next().is_some_and(|c| c.is_ascii_digit())).count();
    assert_eq!(rows, 3, "{out}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "level,sigma,mse");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("2,0.25,"));
}

#[test]
fn eval_rejects_mismatched_k() {
    let f = fixture();
    let other = f.dir.path().join("k2.mbtfq");
    ok(&["generate", "--preset", "flat", "--k", "2", "--per-texel", "200", "--samples", "1", "-o", s(&other)]);
    assert_eq!(code(&["eval", "--material", s(&f.material), "--dataset", s(&other)]), 2);
}

#[test]
fn corrupted_files_exit_with_code_2() {
    let f = fixture();
    let bad = f.dir.path().join("bad.neumat");
    let mut bytes = std::fs::read(&f.material).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(code(&["inspect", s(&bad)]), 2);
    let bad_ds = f.dir.path().join("bad.mbtfq");
    let mut bytes = std::fs::read(&f.dataset).unwrap();
    bytes[0] = b'X';
    std::fs::write(&bad_ds, &bytes).unwrap();
    let out = neumat(&["train", s(&bad_ds), "-o", s(&f.dir.path().join("never.neumat")), "--iters", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn flat_material_renders_near_constant_image() {
    let f = fixture();
    let scene = scene_file(f.dir.path(), "flat.scene", Some(&f.material));
    let img_path = f.dir.path().join("flat.pfm");
    ok(&["render", "--scene", s(&scene), "-o", s(&img_path)]);
    let img = Image::read_pfm(&img_path).unwrap();
    let vals: Vec<f64> = img.pixels().iter().map(|p| p[0] as f64).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    assert!(std < 0.01 * mean, "mean {mean} std {std}");
    let want = 0.5 / std::f64::consts::PI;
    assert!((mean / want - 1.0).abs() < 0.05, "{mean}");
}

#[test]
fn lod_sweep_and_reference_outputs() {
    let f = fixture();
    let scene = scene_file(f.dir.path(), "sweep.scene", None);
    let out_png = f.dir.path().join("sweep.png");
    let out = ok(&[
        "render", "--scene", s(&scene), "--material", s(&f.material), "-o", s(&out_png), "--lod-sweep", "4",
        "--reference", "--preset", "flat", "--ref-samples", "2",
    ]);
    for i in 0..4 {
        assert!(f.dir.path().join(format!("sweep.lod{i}.png")).is_file());
        assert!(f.dir.path().join(format!("sweep.lod{i}.reference.png")).is_file());
    }
    assert_eq!(out.lines().filter(|l| l.starts_with("image mse:")).count(), 4);
}

#[test]
fn render_input_errors_exit_with_code_2() {
    let f = fixture();
    let out = f.dir.path().join("e.pfm");
    assert_eq!(code(&["render", "--scene", "/nonexistent.scene", "-o", s(&out)]), 2);
    let no_mat = scene_file(f.dir.path(), "nomat.scene", None);
    assert_eq!(code(&["render", "--scene", s(&no_mat), "-o", s(&out)]), 2);
    let missing = scene_file(f.dir.path(), "missing.scene", Some(Path::new("/nonexistent.neumat")));
    assert_eq!(code(&["render", "--scene", s(&missing), "-o", s(&out)]), 2);
    let bad_scene = f.dir.path().join("bad.scene");
    std::fs::write(&bad_scene, "camera.position = 0 0 1\nlight.colour = 1\n").unwrap();
    assert_eq!(code(&["render", "--scene", s(&bad_scene), "--material", s(&f.material), "-o", s(&out)]), 2);
    // reference without a heightfield
    let scene = scene_file(f.dir.path(), "ok.scene", Some(&f.material));
    assert_eq!(code(&["render", "--scene", s(&scene), "-o", s(&out), "--reference"]), 2);
}

#[test]
fn offset_visualization_is_neutral_at_normal_incidence() {
    let f = fixture();
    let prefix = f.dir.path().join("vis_");
    let out = ok(&["inspect", s(&f.material), "--offset-vis", "0,0", "--offset-vis", "-0.5,0.3", "--vis-prefix", s(&prefix)]);
    assert!(out.contains("offset_0_0.png"));
    let (w, h, data) = read_png_channels(&f.dir.path().join("vis_offset_0_0.png"), 3, false).unwrap();
    assert_eq!((w, h), (8, 8));
    let neutral = 188.0 / 255.0;
    for px in data.chunks(3) {
        assert!((px[0] - neutral).abs() < 1e-9 && (px[1] - neutral).abs() < 1e-9 && px[2] == 0.0, "{px:?}");
    }
    assert!(f.dir.path().join("vis_offset_-0.5_0.3.png").is_file());
    assert_eq!(code(&["inspect", s(&f.material), "--offset-vis", "0.9,0.9"]), 2);
}

#[test]
fn single_thread_runs_are_byte_identical() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str, threads: &str| {
        let m = dir.path().join(format!("{tag}.neumat"));
        ok(&[
            "train", s(&f.dataset), "-o", s(&m), "--iters", "20", "--batch", "256", "--threads", threads,
        ]);
        let scene = scene_file(dir.path(), &format!("{tag}.scene"), Some(&m));
        let img = dir.path().join(format!("{tag}.pfm"));
        ok(&["render", "--scene", s(&scene), "-o", s(&img), "--spp", "2", "--threads", threads]);
        (std::fs::read(&m).unwrap(), std::fs::read(&img).unwrap(), std::fs::read(m.with_extension("loss.tsv")).unwrap())
    };
    let a = run("a", "1");
    let b = run("b", "1");
    assert!(a == b, "single-thread runs differ");
    // reductions are ordered, so more workers give the same bytes
    let c = run("c", "2");
    assert!(a == c, "thread count changed the output");
}
