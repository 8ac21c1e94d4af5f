//! End-to-end tests of the operator binary: fixture runs, exit codes,
//! report determinism, audit round-trips, and the policy/manifest flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pbd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbd")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).display().to_string()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn fixtures_run_clean() {
    for (scenario, config) in [("ehr", "ehr.cfg"), ("dbt", "dbt.cfg"), ("ct", "ct.cfg")] {
        let out = pbd(&["run", "--scenario", scenario, "--config", &fixture(config), "--seed", "7"]);
        let text = stdout(&out);
        assert!(
            out.status.success(),
            "{scenario} exited {:?}\nstdout:\n{text}\nstderr:\n{}",
            out.status.code(),
            stderr(&out)
        );
        assert!(text.ends_with("outcome PASS\n"), "{scenario} report:\n{text}");
        assert!(text.contains(&format!("scenario {scenario}")));
    }
}

#[test]
fn contact_tracing_alias_is_accepted() {
    let out = pbd(&[
        "run",
        "--scenario",
        "contact-tracing",
        "--config",
        &fixture("ct.cfg"),
        "--seed",
        "7",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
}

#[test]
fn reports_are_byte_identical_for_equal_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    let c = dir.path().join("c.txt");
    for (path, seed) in [(&a, "11"), (&b, "11"), (&c, "12")] {
        let out = pbd(&[
            "run",
            "--scenario",
            "ehr",
            "--config",
            &fixture("ehr.cfg"),
            "--seed",
            seed,
            "--report-out",
            &path.display().to_string(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn failed_expectation_exits_one_and_still_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("wrong.cfg");
    // The consent is valid, so expecting a deny must fail the run.
    fs::write(&config, "scenario ehr\nstep consent verb=treatment expect=deny:NO_RULE\n").unwrap();
    let out = pbd(&["run", "--scenario", "ehr", "--config", &config.display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("FAIL"), "report:\n{text}");
    assert!(text.ends_with("outcome FAIL\n"));
}

#[test]
fn config_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let cases: Vec<Vec<String>> = vec![
        // file does not exist
        vec![
            "run".into(),
            "--scenario".into(),
            "ehr".into(),
            "--config".into(),
            missing.display().to_string(),
        ],
        // unknown scenario name
        vec![
            "run".into(),
            "--scenario".into(),
            "census".into(),
            "--config".into(),
            fixture("ehr.cfg"),
        ],
        // flag and config disagree
        vec![
            "run".into(),
            "--scenario".into(),
            "dbt".into(),
            "--config".into(),
            fixture("ehr.cfg"),
        ],
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = pbd(&refs);
        assert_eq!(out.status.code(), Some(2), "args {args:?}\nstderr: {}", stderr(&out));
        assert!(stderr(&out).starts_with("pbd: "), "stderr: {}", stderr(&out));
    }

    let malformed = dir.path().join("bad.cfg");
    fs::write(&malformed, "scenario ehr\nstep consent verb\n").unwrap();
    let out =
        pbd(&["run", "--scenario", "ehr", "--config", &malformed.display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
}

/// One authority: `--audit-out` writes exactly the given path, and the
/// chain survives `audit-verify` until a byte is touched.
#[test]
fn audit_chain_round_trips_and_tampering_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.log");
    let report = dir.path().join("report.txt");
    let out = pbd(&[
        "run",
        "--scenario",
        "ehr",
        "--config",
        &fixture("ehr.cfg"),
        "--seed",
        "7",
        "--audit-out",
        &log.display().to_string(),
        "--report-out",
        &report.display().to_string(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let out = pbd(&["audit-verify", &log.display().to_string()]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("ok ("), "{}", stdout(&out));

    // Flip one event token in the middle of the chain.
    let text = fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let target = lines.len() / 2;
    let mutated: Vec<String> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if i == target {
                l.replacen("access", "acxess", 1)
            } else {
                l.to_string()
            }
        })
        .collect();
    let tampered = dir.path().join("tampered.log");
    fs::write(&tampered, mutated.join("\n") + "\n").unwrap();
    let out = pbd(&["audit-verify", &tampered.display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stdout(&out).starts_with(&format!("first-bad-entry {target}:")),
        "{}",
        stdout(&out)
    );

    // Truncation is invisible without the published head, and located
    // exactly with it.
    let truncated = dir.path().join("truncated.log");
    let keep = lines.len() - 3;
    fs::write(&truncated, lines[..keep].join("\n") + "\n").unwrap();
    let out = pbd(&["audit-verify", &truncated.display().to_string()]);
    assert!(out.status.success(), "a clean prefix verifies on its own");
    let head = lines.last().unwrap().split(' ').last().unwrap();
    let out = pbd(&[
        "audit-verify",
        &truncated.display().to_string(),
        "--head",
        head,
        "--len",
        &lines.len().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).starts_with(&format!("first-bad-entry {keep}:")), "{}", stdout(&out));
}

/// Five authorities: the base path fans out per authority and every
/// chain verifies independently.
#[test]
fn federated_scenario_writes_one_chain_per_authority() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("audit.log");
    let report = dir.path().join("report.txt");
    let out = pbd(&[
        "run",
        "--scenario",
        "dbt",
        "--config",
        &fixture("dbt.cfg"),
        "--seed",
        "21",
        "--audit-out",
        &base.display().to_string(),
        "--report-out",
        &report.display().to_string(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let expected: Vec<PathBuf> =
        ["r1-payments", "r2-sponsor", "r3-switch", "r4-alpha", "r4-beta"]
            .iter()
            .map(|name| dir.path().join(format!("audit-{name}.log")))
            .collect();
    for path in &expected {
        assert!(path.exists(), "missing {}", path.display());
        let out = pbd(&["audit-verify", &path.display().to_string()]);
        assert!(out.status.success(), "{} failed verification", path.display());
    }
}

/// `--rules` swaps the loaded policy: with the doctor-terminal rule
/// removed, the same view step that the fixture grants is now denied
/// with NO_RULE — and the script that expects that passes.
#[test]
fn rules_override_replaces_the_policy() {
    let dir = tempfile::tempdir().unwrap();
    let rules = dir.path().join("no-view.rules");
    fs::write(
        &rules,
        "rule=intake priority=10 te=name:imaging-station type=DT1/ScanOrder@?x require=consent(?x,treatment,org:HospitalA)\n\
         rule=analyze priority=20 te=name:mri-analyzer type=DT2/MRIScan@?x require=consent(?x,treatment,org:HospitalA)\n",
    )
    .unwrap();
    let config = dir.path().join("no-view.cfg");
    fs::write(
        &config,
        "scenario ehr\n\
         step consent verb=treatment expect=ok\n\
         step consent verb=consulted expect=ok\n\
         step intake expect=ok\n\
         step analyze expect=ok\n\
         step view expect=deny:NO_RULE\n",
    )
    .unwrap();
    let out = pbd(&[
        "run",
        "--scenario",
        "ehr",
        "--config",
        &config.display().to_string(),
        "--rules",
        &rules.display().to_string(),
    ]);
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&out), stderr(&out));

    // A rules file that does not parse is a config error.
    let broken = dir.path().join("broken.rules");
    fs::write(&broken, "rule=\n").unwrap();
    let out = pbd(&[
        "run",
        "--scenario",
        "ehr",
        "--config",
        &config.display().to_string(),
        "--rules",
        &broken.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // The federated scenario refuses a single-file policy swap.
    let out = pbd(&[
        "run",
        "--scenario",
        "dbt",
        "--config",
        &fixture("dbt.cfg"),
        "--rules",
        &rules.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

/// `--manifests` puts operator manifests through the approval-time
/// structural review before anything runs.
#[test]
fn manifest_review_rejects_structural_violations() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.manifests");
    fs::write(
        &good,
        "name night-batch\n\
         version 1\n\
         input_types DT4/DiagnosisReport@?x\n\
         output_types DT6/CohortStats\n\
         sink false\n\
         minimisation_policy none\n\
         callback true\n\
         \n\
         name weekly-export\n\
         version 2\n\
         input_types DT6/CohortStats@-\n\
         output_types DT7/Extract\n\
         sink true\n\
         minimisation_policy fields=count aggregate=true template=Weekly count: {count}\n\
         callback true\n",
    )
    .unwrap();
    let out = pbd(&[
        "run",
        "--scenario",
        "ehr",
        "--config",
        &fixture("ehr.cfg"),
        "--manifests",
        &good.display().to_string(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("reviewed 2 manifest(s)"), "stderr: {}", stderr(&out));

    // A sink with no minimisation policy must be refused at review.
    let bad = dir.path().join("bad.manifests");
    fs::write(
        &bad,
        "name leaky-sink\n\
         version 1\n\
         input_types DT4/DiagnosisReport@?x\n\
         output_types DT8/Rows\n\
         sink true\n\
         minimisation_policy none\n\
         callback true\n",
    )
    .unwrap();
    let out = pbd(&[
        "run",
        "--scenario",
        "ehr",
        "--config",
        &fixture("ehr.cfg"),
        "--manifests",
        &bad.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("minimisation"), "stderr: {}", stderr(&out));
}
