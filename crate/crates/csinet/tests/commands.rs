use std::fs;
use std::path::Path;

use csinet::io;
use tempfile::TempDir;

fn run(args: &[&str]) -> (anyhow::Result<i32>, String, String) {
    let mut argv = vec!["csinet".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = csinet::main_with(&argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code.unwrap(), 0, "{args:?}\n{out}\n{err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path) {
    ok(&["gen-data", "--out", p(dir), "--train", "8", "--val", "4", "--test", "4", "--seed", "3"]);
}

#[test]
fn gen_data_writes_three_splits() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    let out = ok(&["gen-data", "--out", p(&data), "--train", "6", "--val", "2", "--test", "2", "--threads", "2"]);
    assert!(out.contains("normalization scale"));
    for split in ["train", "val", "test"] {
        let d = io::read_dataset(&data.join(split)).unwrap();
        assert_eq!(d.meta.split, split);
    }
    assert_eq!(io::read_dataset(&data.join("train.csib")).unwrap().len(), 6);
}

#[test]
fn train_eval_encode_decode() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    let runs = t.path().join("runs");
    small_data(&data);
    let out = ok(&[
        "train", "--arch", "shufflecsinet", "--cr", "1/32", "--data", p(&data), "--out", p(&runs), "--steps", "2", "--batch", "4",
        "--quiet",
    ]);
    assert!(out.contains("2 optimizer steps"));
    for f in ["shufflecsinet-cr32.csiw", "shufflecsinet-cr32.final.csiw", "shufflecsinet-cr32.history.csv", "shufflecsinet-cr32.eval.txt"] {
        assert!(runs.join(f).is_file(), "{f}");
    }
    let weights = runs.join("shufflecsinet-cr32.csiw");

    let report = ok(&["eval", "--weights", p(&weights), "--data", p(&data.join("test"))]);
    assert!(report.contains("ShuffleCsiNet"));
    let untrained = ok(&["eval", "--untrained", "--arch", "shufflecsinet", "--cr", "32", "--data", p(&data.join("test"))]);
    assert!(untrained.contains("untrained"));

    let (code, _, _) = run(&["eval", "--weights", p(&weights), "--arch", "convcsinet", "--data", p(&data.join("test"))]);
    assert!(code.unwrap_err().to_string().contains("--arch asks for ConvCsiNet"));

    let codes = t.path().join("codes.csib");
    let recon = t.path().join("recon.csib");
    ok(&["encode", "--weights", p(&weights), "--input", p(&data.join("test")), "--out", p(&codes), "--chunk", "3"]);
    let s = io::read_tensor(&codes).unwrap();
    assert_eq!(s.shape().to_string(), "(4,16,2,2)");
    let out = ok(&["decode", "--weights", p(&weights), "--input", p(&codes), "--out", p(&recon), "--truth", p(&data.join("test"))]);
    assert!(out.contains("NMSE"));
    let y: csinet::core::Tensor4<f32> = io::read_tensor(&recon).unwrap().into_tensor();
    assert_eq!(y.shape().to_string(), "(4,2,32,32)");

    // decoding what encode wrote equals the direct reconstruction
    let model = io::read_weights(&weights, None).unwrap();
    let x = io::read_dataset(&data.join("test")).unwrap().x;
    assert_eq!(model.reconstruct(&x, 4).unwrap(), y);
}

#[test]
fn analyze_formats() {
    let text = ok(&["analyze", "--arch", "convcsinet", "--cr", "16", "--mode", "paper-table", "--scope", "encoder"]);
    assert!(text.contains("58,515,456"));
    assert!(text.contains("residual +248"));
    let csv = ok(&["analyze", "--arch", "shufflecsinet", "--format", "csv", "--scope", "decoder"]);
    let header = csv.lines().next().unwrap();
    assert!(header.contains("params") && header.contains("flops"), "{header}");
}

#[test]
fn config_file_with_flag_precedence() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "# paper table\narch = shufflecsinet\ncr = 32\nmode = paper-table\nscope = encoder\n").unwrap();
    let out = ok(&["analyze", "--config", p(&cfg)]);
    assert!(out.contains("11,550,720"));
    let out = ok(&["analyze", "--config", p(&cfg), "--cr", "16"]);
    assert!(out.contains("11,845,632"));

    fs::write(&cfg, "speed = 3\n").unwrap();
    let (code, _, _) = run(&["analyze", "--config", p(&cfg)]);
    assert!(format!("{:#}", code.unwrap_err()).contains("unknown key 'speed'"));
}

#[test]
fn verify_names_damaged_tensor() {
    let t = TempDir::new().unwrap();
    let model = csinet::core::models::ModelGraph::<f32>::build(csinet::core::models::ModelSpec::default(), 1).unwrap();
    let path = t.path().join("w.csiw");
    io::write_weights(&path, &model).unwrap();
    let good = ok(&["verify", "--weights", p(&path)]);
    assert!(good.contains("\"passed\": true"));

    let mut bytes = fs::read(&path).unwrap();
    let name = b"enc.ecn2.bn.running_var";
    let at = bytes.windows(name.len()).position(|w| w == name).unwrap() + name.len() + 16;
    bytes[at..at + 4].copy_from_slice(&(-1.0f32).to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    let (code, out, _) = run(&["verify", "--weights", p(&path)]);
    assert_eq!(code.unwrap(), 1);
    assert!(out.contains("enc.ecn2.bn.running_var"), "{out}");
}

#[test]
fn bad_arguments_are_reported() {
    let (code, _, _) = run(&["analyze", "--cr", "8"]);
    assert!(code.unwrap_err().to_string().contains("16 or 32"));
    let t = TempDir::new().unwrap();
    let (code, _, _) = run(&["eval", "--untrained", "--data", p(&t.path().join("missing"))]);
    assert!(code.is_err());
}
