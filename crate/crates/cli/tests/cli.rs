use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use difflab::denoiser::DenoiserModel;
use difflab::metrics::discrete_kl;
use difflab::training::{Checkpoint, ModelMeta};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difflab")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with('#')), "stdout: {stdout}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const GAUSSIAN: &str = r#"
seed = 4
output = "OUT"

[data]
kind = "mixture"
centers = [[1.0, -1.0]]
sigma = 0.5

[schedule]
type = "cosine"
steps = 20
offset = 0.008

[model]
hidden = [8, 8]
emb_dim = 8

[train]
gamma = 1e-3
batch = 16
steps = 200
"#;

const CLASSES: &str = r#"
seed = 2
output = "OUT"

[data]
kind = "circle"
k = 3
radius = 0.6
sigma = 0.05
quantize = true

[schedule]
type = "linear"
steps = 15

[model]
hidden = [8, 8]
emb_dim = 8

[train]
variant = "VARIANT"
gamma = 1e-3
batch = 16
steps = 100
p_uncond = 0.2
"#;

fn write_config(dir: &Path, name: &str, text: &str, out: &Path) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text.replace("OUT", p(out))).unwrap();
    path
}

fn train(dir: &Path, name: &str, text: &str) -> PathBuf {
    let out = dir.join(name);
    let cfg = write_config(dir, &format!("{name}.toml"), text, &out);
    assert_ok(&run(&["train", p(&cfg)]));
    out.join("model.ckpt")
}

#[test]
fn schedule_dump() {
    let dir = TempDir::new().unwrap();
    let lin = dir.path().join("lin.csv");
    assert_ok(&run(&["schedule", "--type", "linear", "--t", "1000", "--output", p(&lin)]));
    let cos = dir.path().join("cos.csv");
    assert_ok(&run(&["schedule", "--type", "cosine", "--t", "1000", "--s", "0.008", "--output", p(&cos)]));
    for (path, linear) in [(&lin, true), (&cos, false)] {
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,alpha,alpha_bar,beta_tilde"));
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 1000);
        if linear {
            assert_eq!(rows[0][1], 0.9999);
            assert_eq!(rows[999][1], 0.98);
        }
        assert!(rows.iter().all(|r| 1.0 - r[1] <= 0.999));
        assert!(rows.windows(2).all(|w| w[1][2] < w[0][2]));
    }
    assert_eq!(code(&run(&["schedule", "--type", "linear", "--t", "1", "--output", p(&lin)])), 2);
    assert_eq!(code(&run(&["schedule", "--type", "cosine", "--t", "10", "--s", "1.5", "--output", p(&lin)])), 2);
    assert_eq!(code(&run(&["schedule", "--type", "bogus", "--t", "10", "--output", p(&lin)])), 2);
}

#[test]
fn training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = train(dir.path(), "a", GAUSSIAN);
    let b = train(dir.path(), "b", GAUSSIAN);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let loss = |ck: &Path| std::fs::read(ck.with_file_name("loss.csv")).unwrap();
    assert_eq!(loss(&a), loss(&b));
    assert_eq!(String::from_utf8(loss(&a)).unwrap().lines().count(), 201);

    // Same output directory twice: every file, manifest included, is identical.
    let manifest = std::fs::read(a.with_file_name("manifest.json")).unwrap();
    train(dir.path(), "a", GAUSSIAN);
    assert_eq!(std::fs::read(a.with_file_name("manifest.json")).unwrap(), manifest);

    let other = dir.path().join("c");
    let cfg = write_config(dir.path(), "c.toml", GAUSSIAN, &other);
    assert_ok(&run(&["train", p(&cfg), "--seed", "5"]));
    assert_ne!(std::fs::read(other.join("model.ckpt")).unwrap(), std::fs::read(&a).unwrap());
}

#[test]
fn zero_steps_store_the_initialization() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("init");
    let cfg = write_config(dir.path(), "init.toml", GAUSSIAN, &out);
    assert_ok(&run(&["train", p(&cfg), "--steps", "0"]));
    let ck = Checkpoint::load(&out.join("model.ckpt")).unwrap();
    let ModelMeta::Denoiser { arch, .. } = ck.meta.model.clone() else { panic!("denoiser expected") };
    let fresh = DenoiserModel::new(arch, 4).unwrap();
    let want: Vec<f32> = fresh.params().data().iter().map(|&v| v as f32).collect();
    assert_eq!(ck.params, want);
    assert_eq!(ck.meta.step, 0);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x");
    let unknown = write_config(dir.path(), "u.toml", &format!("{GAUSSIAN}\nextra = 1\n"), &out);
    assert_eq!(code(&run(&["train", p(&unknown)])), 2);
    let typo = write_config(dir.path(), "t.toml", &GAUSSIAN.replace("gamma", "gama"), &out);
    assert_eq!(code(&run(&["train", p(&typo)])), 2);
    let csv = GAUSSIAN.replace("kind = \"mixture\"\ncenters = [[1.0, -1.0]]\nsigma = 0.5", "kind = \"csv\"\npath = \"/no/such/file.csv\"");
    let missing = write_config(dir.path(), "m.toml", &csv, &out);
    let res = run(&["train", p(&missing)]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("does not exist"));
    assert_eq!(code(&run(&["train", p(&dir.path().join("absent.toml"))])), 2);
    let bad_gamma = write_config(dir.path(), "g.toml", &GAUSSIAN.replace("gamma = 1e-3", "gamma = -1.0"), &out);
    assert_eq!(code(&run(&["train", p(&bad_gamma)])), 2);
}

#[test]
fn data_and_numeric_failures() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x");
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "x0,x1\n0.5,oops\n").unwrap();
    let csv = GAUSSIAN.replace(
        "kind = \"mixture\"\ncenters = [[1.0, -1.0]]\nsigma = 0.5",
        &format!("kind = \"csv\"\npath = \"{}\"", p(&data)),
    );
    let cfg = write_config(dir.path(), "bad.toml", &csv, &out);
    assert_eq!(code(&run(&["train", p(&cfg)])), 3);

    let nan = write_config(dir.path(), "nan.toml", &GAUSSIAN.replace("gamma = 1e-3", "gamma = 1e200"), &out);
    let res = run(&["train", p(&nan)]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
}

#[test]
fn sampling_flags_and_determinism() {
    let dir = TempDir::new().unwrap();
    let ck = train(dir.path(), "g", GAUSSIAN);
    let sample = |name: &str, extra: &[&str]| {
        let path = dir.path().join(name);
        let mut args = vec!["sample", "--checkpoint", p(&ck), "--count", "50", "--output", p(&path)];
        args.extend_from_slice(extra);
        (run(&args), path)
    };
    let (r1, f1) = sample("d1.csv", &["--variant", "ddim", "--k", "10", "--eta", "0", "--seed", "7"]);
    let (r2, f2) = sample("d2.csv", &["--variant", "ddim", "--k", "10", "--eta", "0", "--seed", "7"]);
    assert_ok(&r1);
    assert_ok(&r2);
    assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(f1.with_extension("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["variant"], "ddim");
    assert_eq!(manifest["k"], 10);
    assert_eq!(manifest["eta"], 0.0);
    assert_eq!(manifest["seed"], 7);
    let text = std::fs::read_to_string(&f1).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(text.starts_with("x0,x1\n"));

    let (too_many, _) = sample("k.csv", &["--variant", "ddim", "--k", "21"]);
    assert_eq!(code(&too_many), 2);
    assert!(stderr(&too_many).contains("K=21") && stderr(&too_many).contains("T=20"), "{}", stderr(&too_many));
    assert_eq!(code(&sample("e.csv", &["--variant", "ddim", "--eta", "1.5"]).0), 2);
    assert_eq!(code(&sample("w.csv", &["--variant", "ddpm", "--w", "1"]).0), 2);
    assert_eq!(code(&sample("z.csv", &["--count", "0"]).0), 2);
    assert_eq!(code(&sample("i.csv", &["--variant", "improved", "--k", "5"]).0), 5);
    assert_eq!(code(&sample("c.csv", &["--class", "1"]).0), 5);
    assert_eq!(code(&sample("g.csv", &["--variant", "guided", "--w", "0"]).0), 5);

    let (pgm, img) = sample("grid.pgm", &["--columns", "10"]);
    assert_ok(&pgm);
    assert!(std::fs::read(&img).unwrap().starts_with(b"P5\n20 5\n255\n"));

    let missing = run(&["sample", "--checkpoint", p(&dir.path().join("none.ckpt")), "--output", p(&f1)]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn guided_with_zero_weight_matches_conditional_ddpm() {
    let dir = TempDir::new().unwrap();
    let ck = train(dir.path(), "cfg", &CLASSES.replace("VARIANT", "cfg"));
    let out_a = dir.path().join("guided.csv");
    let out_b = dir.path().join("ddpm.csv");
    let base = ["sample", "--checkpoint", p(&ck), "--count", "40", "--seed", "3", "--class", "2"];
    let mut a: Vec<&str> = base.to_vec();
    a.extend(["--variant", "guided", "--w", "0", "--output", p(&out_a)]);
    let mut b: Vec<&str> = base.to_vec();
    b.extend(["--variant", "ddpm", "--output", p(&out_b)]);
    assert_ok(&run(&a));
    assert_ok(&run(&b));
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());

    let mut bad = base.to_vec();
    bad[7] = "3";
    bad.extend(["--output", p(&out_b)]);
    assert_eq!(code(&run(&bad)), 2);
}

#[test]
fn improved_checkpoints_sample_with_strides() {
    let dir = TempDir::new().unwrap();
    let ck = train(dir.path(), "imp", &CLASSES.replace("VARIANT", "improved"));
    let out = dir.path().join("s.csv");
    assert_ok(&run(&["sample", "--checkpoint", p(&ck), "--variant", "improved", "--k", "5", "--output", p(&out)]));
    assert_eq!(code(&run(&["sample", "--checkpoint", p(&ck), "--output", p(&out)])), 5);
    let info = run(&["info", p(&ck)]);
    assert_ok(&info);
    let text = String::from_utf8(info.stdout).unwrap();
    assert!(text.contains("# kind: denoiser") && text.contains("noise_and_variance") && text.contains("# step: 100"));
}

fn write_pgm_dir(dir: &Path, seed: u8) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..3u8 {
        let body: Vec<u8> = (0..16u8).map(|k| k.wrapping_mul(13).wrapping_add(i * 7 + seed)).collect();
        let mut raw = b"P5\n4 4\n255\n".to_vec();
        raw.extend(body);
        std::fs::write(dir.join(format!("img{i}.pgm")), raw).unwrap();
    }
}

fn metric_rows(path: &Path) -> Vec<(String, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value,k_samples,m_samples,batches,std"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn evaluation_metrics() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let samples = d.join("s.csv");
    std::fs::write(&samples, "x0,x1\n0.1,0.5\n-0.3,0.2\n0.7,-0.4\n0.0,0.0\n1.2,0.9\n").unwrap();
    let out = d.join("m.csv");
    assert_ok(&run(&["eval", "--gen", p(&samples), "--ref", p(&samples), "--metrics", "fid,psnr", "--raw-features", "--output", p(&out)]));
    let rows = metric_rows(&out);
    assert_eq!(rows[0].0, "fid");
    assert!(rows[0].1.abs() <= 1e-6);
    assert_eq!(rows[1], ("psnr".to_string(), 1e9));
    assert_eq!(code(&run(&["eval", "--gen", p(&samples), "--ref", p(&samples), "--metrics", "fid", "--output", p(&out)])), 2);

    let (ga, gb) = (d.join("imgs_a"), d.join("imgs_b"));
    write_pgm_dir(&ga, 0);
    write_pgm_dir(&gb, 0);
    assert_ok(&run(&["eval", "--gen", p(&ga), "--ref", p(&gb), "--metrics", "psnr,ssim", "--output", p(&out)]));
    let rows = metric_rows(&out);
    assert_eq!(rows[0].1, 1e9);
    assert!((rows[1].1 - 1.0).abs() <= 1e-12);
    let gc = d.join("imgs_c");
    write_pgm_dir(&gc, 40);
    assert_ok(&run(&["eval", "--gen", p(&ga), "--ref", p(&gc), "--metrics", "psnr,ssim", "--output", p(&out)]));
    let rows = metric_rows(&out);
    assert!(rows[0].1 < 1e9 && rows[1].1 < 1.0);

    let (hv, hw) = (d.join("hv.csv"), d.join("hw.csv"));
    let v = [0.1, 0.2, 0.3, 0.4];
    let w = [0.25, 0.25, 0.4, 0.1];
    let hist = |h: &[f64]| format!("p\n{}\n", h.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\n"));
    std::fs::write(&hv, hist(&v)).unwrap();
    std::fs::write(&hw, hist(&w)).unwrap();
    assert_ok(&run(&["eval", "--gen", p(&hv), "--ref", p(&hw), "--metrics", "kl", "--output", p(&out)]));
    assert_eq!(metric_rows(&out)[0].1, discrete_kl(&v, &w).unwrap());

    let res = run(&["eval", "--gen", p(&d.join("nope.csv")), "--ref", p(&samples), "--metrics", "psnr", "--output", p(&out)]);
    assert_eq!(code(&res), 3);
}

#[test]
fn classifier_training_feeds_inception_score() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"
task = "classifier"
seed = 6
output = "OUT"

[data]
kind = "circle"
k = 4
radius = 1.0
sigma = 0.1

[model]
hidden = [16]

[train]
gamma = 0.1
batch = 32
steps = 400
samples = 2000
"#;
    let ck = train(dir.path(), "clf", cfg);
    let info = String::from_utf8(run(&["info", p(&ck)]).stdout).unwrap();
    assert!(info.contains("# kind: classifier"));

    let gen = dir.path().join("gen.csv");
    let rows: Vec<String> = (0..400)
        .map(|i| {
            let a = std::f64::consts::FRAC_PI_2 * (i % 4) as f64;
            format!("{},{}", a.cos(), a.sin())
        })
        .collect();
    std::fs::write(&gen, format!("x0,x1\n{}\n", rows.join("\n"))).unwrap();
    let out = dir.path().join("is.csv");
    assert_ok(&run(&["eval", "--gen", p(&gen), "--ref", p(&gen), "--metrics", "is,fid", "--classifier", p(&ck), "--batches", "4", "--output", p(&out)]));
    let rows = metric_rows(&out);
    // Four balanced, confidently classified clusters score close to 4.
    assert!(rows[0].1 > 3.0 && rows[0].1 <= 4.0 + 1e-9, "{}", rows[0].1);
    assert!(rows[1].1.abs() <= 1e-6);
    let wrong = run(&["sample", "--checkpoint", p(&ck), "--output", p(&gen)]);
    assert_eq!(code(&wrong), 5);
}
