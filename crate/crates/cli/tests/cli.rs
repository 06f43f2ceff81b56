//! Drives the `dfres` binary end to end on small inputs.

use std::path::Path;
use std::process::{Command, Output};

use dfres_core::field::{Frame, Parity};
use dfres_core::ppm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dfres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfres")).args(args).output().expect("spawn dfres")
}

fn ok(args: &[&str]) -> Output {
    let out = dfres(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_progressive(dir: &Path, n: usize, h: usize, w: usize) -> Vec<Frame> {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    (0..n)
        .map(|i| {
            let px = (0..3 * h * w).map(|_| ppm::from_byte(rng.gen())).collect();
            let f = Frame::new(h, w, px).unwrap();
            ppm::write_frame(&dir.join(ppm::numbered_name(i)), &f).unwrap();
            f
        })
        .collect()
}

const TINY: [&str; 10] = [
    "--set", "base_channels=8", "--set", "qk_channels=1", "--set", "feat_blocks=1", "--set", "align_blocks=1",
    "--set", "recon_blocks=1",
];

#[test]
fn synth_writes_alternating_fields_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (prog, fields) = (dir.path().join("prog"), dir.path().join("fields"));
    let frames = write_progressive(&prog, 10, 6, 8);
    ok(&["synth", p(&prog), p(&fields)]);
    let stream = ppm::read_stream(&fields).unwrap();
    assert_eq!(stream.len(), 10);
    for (i, f) in stream.fields().iter().enumerate() {
        let parity = if i % 2 == 0 { Parity::Odd } else { Parity::Even };
        assert_eq!(f.field.parity(), parity);
        assert_eq!(f.field, frames[i].field(parity));
    }
    let manifest = std::fs::read_to_string(fields.join(ppm::MANIFEST_NAME)).unwrap();
    let tags: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    assert_eq!(tags[..4], ["O", "E", "O", "E"]);
    assert!(fields.join("run_config.txt").exists());
}

#[test]
fn synth_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = dfres(&["synth", p(&empty), p(&dir.path().join("o1"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no frames"));

    let odd = dir.path().join("odd");
    write_progressive(&odd, 3, 4, 4);
    ppm::write_image(&odd.join(ppm::numbered_name(1)), 5, 4, &vec![0.5; 3 * 5 * 4]).unwrap();
    let out = dfres(&["synth", p(&odd), p(&dir.path().join("o2"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&ppm::numbered_name(1)));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(dfres(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(dfres(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let prog = dir.path().join("prog");
    write_progressive(&prog, 2, 4, 4);
    assert_eq!(dfres(&["--set", "nonsense", "synth", p(&prog), p(&dir.path().join("f"))]).status.code(), Some(1));
    assert_eq!(dfres(&["--set", "height=3", "make-dataset", p(&dir.path().join("d"))]).status.code(), Some(1));
    assert_eq!(dfres(&["deinterlace", "baseline=cubic", p(&prog), p(&dir.path().join("x"))]).status.code(), Some(1));
}

#[test]
fn train_deinterlace_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "--set", "clips=2", "--set", "held_out=1", "--set", "frames=8", "--set", "height=16", "--set", "width=16",
        "make-dataset", p(&data),
    ]);
    let train = |name: &str, extra: &[&str]| {
        let weights = dir.path().join(name);
        let mut args = vec!["--set", "iterations=10", "--set", "crop_size=8", "--set", "batch_size=2"];
        args.extend(TINY);
        args.extend(extra);
        args.extend(["train", p(&data), p(&weights)]);
        ok(&args);
        weights
    };
    let a = train("a.dfrs", &[]);
    let b = train("b.dfrs", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (la, lb) = (dir.path().join("a.loss.csv"), dir.path().join("b.loss.csv"));
    assert_eq!(std::fs::read(&la).unwrap(), std::fs::read(&lb).unwrap());
    assert_eq!(std::fs::read_to_string(&la).unwrap().lines().count(), 11);

    train("delta.dfrs", &["--set", "align_mode=delta_dfres"]);
    let cfg = std::fs::read_to_string(dir.path().join("delta.config.txt")).unwrap();
    assert!(cfg.contains("align_mode=delta_dfres"), "{cfg}");

    // Deinterlace a held-out clip: one frame per field, reference rows untouched.
    let clip = data.join("heldout").join(std::fs::read_dir(data.join("heldout")).unwrap().next().unwrap().unwrap().file_name());
    let fields = dir.path().join("fields");
    ok(&["synth", p(&clip), p(&fields)]);
    let stream = ppm::read_stream(&fields).unwrap();
    for method in [p(&a), "baseline=bob"] {
        let out = dir.path().join(format!("out_{}", method.len()));
        ok(&["deinterlace", method, p(&fields), p(&out)]);
        let frames = ppm::read_clip(&out).unwrap();
        assert_eq!(frames.len(), stream.len());
        for (f, s) in frames.iter().zip(stream.fields()) {
            assert_eq!(f.field(s.field.parity()), s.field);
        }
    }
    ok(&["--set", "attention_mode=esa", "deinterlace", p(&a), p(&fields), p(&dir.path().join("esa"))]);

    let report = dir.path().join("gt.csv");
    let out = ok(&["eval", p(&clip), "ground_truth", p(&report)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ssim=1.000000"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + (8 - 4) + 1);
    ok(&["--workers", "2", "eval", p(&data.join("heldout")), p(&a), p(&dir.path().join("m.csv"))]);
    assert!(dir.path().join("m.config.txt").exists());
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["--set", "clips=1", "--set", "held_out=0", "--set", "frames=6", "--set", "height=16", "--set", "width=16", "make-dataset", p(&data)]);
    let mut args = vec!["--set", "iterations=50", "--set", "crop_size=8", "--set", "batch_size=1", "--set", "learning_rate=1e30"];
    args.extend(TINY);
    let w = dir.path().join("w.dfrs");
    args.extend(["train", p(&data), p(&w)]);
    let out = dfres(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning rate"));
}

#[test]
fn bench_attn_writes_rows_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    ok(&["bench-attn", "--sizes", "64,128", "--channels", "8", "--reps", "1", "--out", p(&out)]);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("mode,n,seconds,peak_bytes,max_deviation\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("sa,") || l.starts_with("esa,")).count(), 4);
    assert!(csv.contains("exponent,sa,") && csv.contains("exponent,esa,"));
}
