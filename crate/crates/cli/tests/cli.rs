use std::path::Path;
use std::process::{Command, Output};

use debias::calibration::read_trace;
use debias::corpus::SyntheticCorpusConfig;
use debias::judge::ClassifierTrainConfig;
use debias::lm::LmTrainConfig;
use debias::pipeline::{files, ExperimentConfig, GenerationConfig, LmDims};

fn debias(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_debias"));
    cmd.args(args).env_remove("DEBIAS_OUT_DIR");
    if let Some(p) = out_env {
        cmd.env("DEBIAS_OUT_DIR", p);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = ExperimentConfig {
        bias_words_per_class: 5,
        corpus: SyntheticCorpusConfig {
            docs_per_class: 30,
            doc_length: 16,
            neutral_vocab_size: 30,
            ..Default::default()
        },
        lm: LmDims {
            context_length: 32,
            width: 16,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        lm_train: LmTrainConfig {
            epochs: 1,
            ..Default::default()
        },
        judge: ClassifierTrainConfig {
            epochs: 1,
            hidden: 8,
            ..Default::default()
        },
        debias_head: ClassifierTrainConfig {
            epochs: 1,
            hidden: 8,
            ..Default::default()
        },
        generation: GenerationConfig {
            max_new_tokens: 6,
            samples_per_prompt: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    c.calibration.cls.inner_steps = 2;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, c.to_toml()).unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(debias(&["no-such-command"], None).status.code(), Some(2));
    assert_eq!(debias(&["report", "--bogus"], None).status.code(), Some(2));
    assert_eq!(debias(&["generate", "--mode", "loud"], None).status.code(), Some(2));
    let o = debias(&["report"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("DEBIAS_OUT_DIR"));
}

#[test]
fn validate_config_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good.toml");
    std::fs::write(&good, ExperimentConfig::default().to_toml()).unwrap();
    assert!(debias(&["validate-config", "--config", good.to_str().unwrap()], None).status.success());

    let mut c = ExperimentConfig::default();
    c.calibration.cls.gamma = 1.2;
    c.generation.samples_per_prompt = 0;
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, c.to_toml()).unwrap();
    let o = debias(&["validate-config", "--config", bad.to_str().unwrap()], None);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("gamma must be in (0,1)"), "{err}");
    assert!(err.contains("samples_per_prompt"), "{err}");

    let missing = debias(&["validate-config", "--config", "/no/such/config.toml"], None);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("/no/such/config.toml"));
}

#[test]
fn evaluate_without_generations_names_the_missing_log() {
    let tmp = tempfile::tempdir().unwrap();
    let o = debias(&["evaluate-bias", "--out", tmp.path().to_str().unwrap()], None);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("generations/vanilla.jsonl"), "{err}");
}

#[test]
fn stage_commands_share_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    for stage in ["synth-corpus", "train-lm", "train-judge", "train-debias-head", "extract-bias-words"] {
        let o = debias(&[stage, "--config", &config], Some(&out));
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    assert!(out.join(files::CORPUS).exists() && out.join(files::HEAD).exists());

    let o = debias(&["generate", "--mode", "vanilla", "--lambda", "0.6", "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));

    let o = debias(
        &["generate", "--mode", "cls", "--lambda", "0.6", "--jobs", "2", "--out", out.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = read_trace(&out.join("traces/cls.jsonl")).unwrap();
    assert!(!trace.is_empty());
    // The cls threshold is 0.05: halve at KL >= 0.1, double at KL <= 0.025.
    for w in trace.windows(2).filter(|w| w[0].sample == w[1].sample) {
        let expected = if w[0].kl >= 0.1 {
            w[0].lambda / 2.0
        } else if w[0].kl <= 0.025 {
            w[0].lambda * 2.0
        } else {
            w[0].lambda
        };
        assert_eq!(w[1].lambda, expected.clamp(1e-3, 10.0));
    }

    for stage in ["baseline-naive", "evaluate-bias", "report"] {
        let o = debias(&[stage, "--out", out.to_str().unwrap()], None);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let tsv = std::fs::read_to_string(out.join("report/report.tsv")).unwrap();
    assert!(tsv.starts_with("attribute\toption\tmode\tlambda\tindirect_bias\tdirect_bias\tppl\tdelta_vs_baseline\n"));
}
