use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedtune::data::{builtin_federation, load_samples, Manifest, Split};
use fedtune::experiment::ExperimentConfig;
use fedtune::Error;
use proptest::prelude::*;

const TINY: &str = r#"
name = "tiny"
seed = 3

[data]
scale = 0.02

[encoder]
embed_dim = 8
heads = 2

[sweep]
heads = ["linear", "convs"]
aggregations = ["fedavg", "fedce"]

[training]
rounds = 2
batch_size = 4
lr = 0.01
width_divisor = 16

[evaluation]
bootstraps = 50
centralized = true
"#;

fn fedtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedtune")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// Relative path → file contents for every file below `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_tiny(tmp: &Path, cfg: &str, out: &str, extra: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    let out_dir = tmp.join(out);
    let mut args = vec!["run", "--config", cfg, "--out", out_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = fedtune(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    snapshot(&out_dir)
}

#[test]
fn runs_are_byte_identical_across_reruns_threads_and_scheduling() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let a = run_tiny(tmp.path(), &cfg, "a", &[]);
    let b = run_tiny(tmp.path(), &cfg, "b", &["--threads", "1"]);
    let serial = write_config(
        tmp.path(),
        "serial.toml",
        &TINY.replace("width_divisor = 16", "width_divisor = 16\nparallel_clients = false"),
    );
    let c = run_tiny(tmp.path(), &serial, "c", &["--threads", "3"]);

    let runs = [
        "linear-clsonly-fedavg",
        "linear-clsonly-fedce",
        "convs-clsonly-fedavg",
        "convs-clsonly-fedce",
        "centralized-linear-clsonly",
        "centralized-convs-clsonly",
        "ncc",
    ];
    for r in runs {
        for f in ["results.csv", "weights.jsonl", "efficiency.csv", "rounds.jsonl"] {
            assert!(a.contains_key(&Path::new(r).join(f)), "missing {r}/{f}");
        }
    }
    assert_eq!(a, b);
    let strip = |m: &BTreeMap<PathBuf, Vec<u8>>| {
        let mut m = m.clone();
        m.remove(Path::new("config.toml"));
        m
    };
    assert_eq!(strip(&a), strip(&c));

    let reseeded = run_tiny(tmp.path(), &cfg, "d", &["--seed", "4"]);
    assert_ne!(
        reseeded[Path::new("convs-clsonly-fedavg/results.csv")],
        a[Path::new("convs-clsonly-fedavg/results.csv")]
    );
}

#[test]
fn gen_data_writes_reproducible_files_that_run_consumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let d1 = tmp.path().join("data1");
    let d2 = tmp.path().join("data2");
    for d in [&d1, &d2] {
        let o = fedtune(&["gen-data", "--config", &cfg, "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let s1 = snapshot(&d1);
    assert_eq!(s1, snapshot(&d2));
    assert_eq!(s1.len(), 6 * 3 + 1);

    let manifest = Manifest::read(&d1.join("manifest.toml")).unwrap();
    let names: Vec<&str> = manifest.clients.iter().map(|c| c.name.as_str()).collect();
    let expected: Vec<String> = builtin_federation().into_iter().map(|c| c.name).collect();
    assert_eq!(names, expected);
    let clients = manifest.load(&d1, Some([8, 8, 8, 8])).unwrap();
    let cfg_struct = ExperimentConfig::from_toml(TINY).unwrap();
    let synth = cfg_struct.clients().unwrap();
    for (a, b) in clients.iter().zip(&synth) {
        for split in Split::ALL {
            assert_eq!(a.counts(split), b.counts(split));
        }
    }
    assert_eq!(load_samples(&d1.join("ADNI_train.fdt"), None, 0).unwrap().len(), synth[0].train.len());

    let manifest_path = d1.join("manifest.toml");
    let from_files = write_config(
        tmp.path(),
        "files.toml",
        &TINY.replace("scale = 0.02", &format!("manifest = {:?}", manifest_path.to_str().unwrap())),
    );
    let via_files = run_tiny(tmp.path(), &from_files, "files", &[]);
    let via_memory = run_tiny(tmp.path(), &cfg, "memory", &[]);
    let key = Path::new("convs-clsonly-fedavg/results.csv");
    assert_eq!(via_files[key], via_memory[key]);
}

#[test]
fn report_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    run_tiny(tmp.path(), &cfg, "res", &[]);
    let res = tmp.path().join("res");
    let r = res.to_str().unwrap();

    let first = fedtune(&["report", r]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let summary = std::fs::read_to_string(res.join("summary.csv")).unwrap();
    assert!(summary.starts_with("run,ADNI,NIFD,OASIS,NACC,BrainLAT,PND,All\n"));
    assert_eq!(summary.lines().count(), 1 + 7);
    assert!(res.join("efficiency_summary.csv").is_file());
    assert!(res.join("significance.csv").is_file());
    let snap = snapshot(&res);
    let second = fedtune(&["report", "--out", r]);
    assert_eq!(code(&second), 0);
    assert_eq!(snapshot(&res), snap);
    assert_eq!(first.stdout, second.stdout);

    let single = fedtune(&["report", res.join("ncc").to_str().unwrap()]);
    assert_eq!(code(&single), 0);
    assert_eq!(String::from_utf8(single.stdout).unwrap().lines().next().unwrap().matches(',').count(), 7);

    let cmp = fedtune(&[
        "compare",
        res.join("ncc").to_str().unwrap(),
        res.join("convs-clsonly-fedavg").to_str().unwrap(),
    ]);
    assert_eq!(code(&cmp), 0);
    let text = String::from_utf8(cmp.stdout).unwrap();
    assert!(text.starts_with("scope,auc_a,auc_b,delta,significant\n"));
    assert_eq!(text.lines().count(), 8);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&fedtune(&["run", "--config", missing.to_str().unwrap(), "--out", o])), 4);

    let unknown = write_config(tmp.path(), "unknown.toml", "[training]\nlearning_rate = 0.1\n");
    assert_eq!(code(&fedtune(&["run", "--config", &unknown, "--out", o])), 2);
    let zero_rounds = write_config(tmp.path(), "zero.toml", "[training]\nrounds = 0\n");
    assert_eq!(code(&fedtune(&["run", "--config", &zero_rounds, "--out", o])), 2);
    let garbage = write_config(tmp.path(), "garbage.toml", "this is = = not toml");
    assert_eq!(code(&fedtune(&["gen-data", "--config", &garbage, "--out", o])), 2);
    assert_eq!(code(&fedtune(&["frobnicate"])), 2);
    assert_eq!(code(&fedtune(&["run", "--seed", "minus-one"])), 2);
    assert_eq!(code(&fedtune(&["run", "--threads", "0", "--out", o])), 2);
    assert!(!out.exists());

    let diverge = write_config(
        tmp.path(),
        "diverge.toml",
        &TINY.replace("lr = 0.01", "lr = 1e30\noptimizer = \"sgd\""),
    );
    let d = fedtune(&["run", "--config", &diverge, "--out", o]);
    assert_eq!(code(&d), 3, "{}", String::from_utf8_lossy(&d.stderr));
    assert!(String::from_utf8_lossy(&d.stderr).contains("round"));

    assert_eq!(code(&fedtune(&["report", tmp.path().join("empty").to_str().unwrap()])), 4);
    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    assert_eq!(code(&fedtune(&["report", tmp.path().join("empty").to_str().unwrap()])), 4);
    assert_eq!(code(&fedtune(&["--help"])), 0);
}

/// A key, a value outside its domain, and the table it lives in.
fn invalid_field() -> impl Strategy<Value = (&'static str, &'static str, String)> {
    prop_oneof![
        Just(("", "name", "\"\"".to_string())),
        Just(("", "name", "\"a/b\"".to_string())),
        (-1e6f64..=0.0).prop_map(|v| ("data", "scale", format!("{v:?}"))),
        (-1e6f64..-1e-9).prop_map(|v| ("data", "shift", format!("{v:?}"))),
        (-1e6f64..-1e-9).prop_map(|v| ("data", "separation", format!("{v:?}"))),
        (-1e6f64..=0.0).prop_map(|v| ("data", "noise", format!("{v:?}"))),
        (-1e6f64..-1e-9).prop_map(|v| ("data", "outlier_factor", format!("{v:?}"))),
        Just(("data", "mode", "\"images\"".to_string())),
        Just(("training", "rounds", "0".to_string())),
        Just(("training", "batch_size", "0".to_string())),
        Just(("training", "eval_batch_size", "0".to_string())),
        Just(("training", "local_epochs", "0".to_string())),
        Just(("training", "width_divisor", "0".to_string())),
        (-1e6f64..-1e-9).prop_map(|v| ("training", "lr", format!("{v:?}"))),
        Just(("training", "lr", "nan".to_string())),
        Just(("training", "lr", "inf".to_string())),
        Just(("training", "optimizer", "\"lbfgs\"".to_string())),
        Just(("training", "dtype", "\"f16\"".to_string())),
        (-5i64..0).prop_map(|v| ("training", "rounds", v.to_string())),
        Just(("evaluation", "bootstraps", "0".to_string())),
        Just(("evaluation", "ncc_distance", "\"manhattan\"".to_string())),
        (-1e6f64..=0.0).prop_map(|v| ("link", "bandwidth_bytes_per_s", format!("{v:?}"))),
        (-1e6f64..-1e-9).prop_map(|v| ("link", "rtt_s", format!("{v:?}"))),
        (1usize..64).prop_filter("not 16", |p| *p != 16).prop_map(|p| ("encoder", "patch_size", p.to_string())),
        Just(("encoder", "embed_dim", "0".to_string())),
        (1usize..383).prop_filter("not a divisor", |h| 384 % h != 0).prop_map(|h| ("encoder", "heads", h.to_string())),
        Just(("encoder", "mlp_ratio", "0".to_string())),
        Just(("sweep", "heads", "[]".to_string())),
        Just(("sweep", "heads", "[\"convxl\"]".to_string())),
        Just(("sweep", "aggregations", "[\"fedprox\"]".to_string())),
        Just(("sweep", "regimes", "[{ kind = \"full\" }]".to_string())),
        Just(("sweep", "aggregations", "[\"fedavg\", \"fedavg\"]".to_string())),
        "[a-z_]{3,12}".prop_filter("unknown", |k| !KNOWN.contains(&k.as_str())).prop_map(|k| ("training", "rounds", format!("3\n{k} = 1"))),
    ]
}

const KNOWN: &[&str] = &[
    "rounds",
    "batch_size",
    "lr",
    "optimizer",
    "local_epochs",
    "eval_batch_size",
    "parallel_clients",
    "dtype",
    "width_divisor",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn invalid_configs_are_rejected((table, key, value) in invalid_field()) {
        let text = if table.is_empty() {
            format!("{key} = {value}\n")
        } else {
            format!("[{table}]\n{key} = {value}\n")
        };
        prop_assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))), "accepted:\n{}", text);
    }

    #[test]
    fn valid_configs_round_trip(
        rounds in 1usize..50,
        batch in 1usize..64,
        lr in 0.0f64..1.0,
        scale in 0.01f64..2.0,
        boots in 1usize..20_000,
        seed in any::<u64>(),
        parallel in any::<bool>(),
    ) {
        let text = format!(
            "seed = {seed}\n[data]\nscale = {scale:?}\n[training]\nrounds = {rounds}\nbatch_size = {batch}\nlr = {lr:?}\nparallel_clients = {parallel}\n[evaluation]\nbootstraps = {boots}\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(cfg.training.rounds, rounds);
        prop_assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert!(!cfg.plans().is_empty());
            n += 1;
        }
    }
    assert!(n >= 4);
}
