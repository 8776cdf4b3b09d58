//! Full acceptance run: every criterion at its stated tolerance and budget.
//! Prints each verdict, then one PASS/FAIL line per criterion, and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use gfftree::harness::{
    branching, critical_tail, laplace_scaling, near_critical, spectral_sanity, Criterion, ExperimentReport, Lab,
    DEFAULT_DELTAS, DEFAULT_S_LADDER,
};
use gfftree::simulator::DEFAULT_SEED;
use gfftree::spectral::BISECTION_TOL;
use gfftree::GridSpec;

struct Outcome {
    passed: bool,
    notes: Vec<String>,
    seconds: f64,
}

#[derive(Default)]
struct Ledger {
    outcomes: BTreeMap<Criterion, Outcome>,
}

impl Ledger {
    fn record(&mut self, criterion: Criterion, passed: bool, note: String, seconds: f64) {
        let o = self.outcomes.entry(criterion).or_insert(Outcome {
            passed: true,
            notes: Vec::new(),
            seconds: 0.0,
        });
        o.passed &= passed;
        o.notes.push(note);
        o.seconds += seconds;
    }

    fn absorb(&mut self, tag: &str, report: &ExperimentReport, seconds: f64) {
        let per = report.by_criterion();
        let share = seconds / per.len().max(1) as f64;
        for v in &report.verdicts {
            println!("  {tag}: {v}");
        }
        for (c, ok) in per {
            self.record(c, ok, tag.to_string(), share);
        }
    }

    fn fail(&mut self, criterion: Criterion, tag: &str, err: impl std::fmt::Display) {
        println!("  {tag}: ERROR [{criterion}] {err}");
        self.record(criterion, false, format!("{tag} errored"), 0.0);
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_gfftree"))
        .args(args)
        .arg("--out")
        .arg(out)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    match status.code() {
        Some(0) | Some(1) => Ok(()),
        other => Err(format!("{args:?} exited with {other:?}")),
    }
}

/// All CSV files under `dir`, keyed by path relative to `dir`.
fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Runs each invocation with one and with three workers and compares every
/// CSV byte for byte.
fn reproducibility(ledger: &mut Ledger) {
    let invocations: [&[&str]; 3] = [
        &["simulate", "--d", "2", "--h", "1.0", "--a", "1.0", "--replicas", "20000", "--seed", "7"],
        &["tail", "--d", "2", "--h", "1.0", "--a", "1.0", "--replicas", "20000", "--size-cap", "100000", "--seed", "7"],
        &["verify", "branching", "--d", "2", "--replicas", "20000", "--seed", "7"],
    ];
    for args in invocations {
        let tag = if args[0] == "verify" { format!("verify {}", args[1]) } else { args[0].to_string() };
        let ((), secs) = timed(|| {
            let one = tempfile::tempdir().unwrap();
            let three = tempfile::tempdir().unwrap();
            let r1 = run_cli(one.path(), &[args, &["--workers", "1"]].concat());
            let r3 = run_cli(three.path(), &[args, &["--workers", "3"]].concat());
            if let Err(e) = r1.and(r3) {
                ledger.fail(Criterion::Reproducibility, &tag, e);
                return;
            }
            let (a, b) = (csv_files(one.path()), csv_files(three.path()));
            let same = !a.is_empty() && a == b;
            println!(
                "  {tag}: {} [{}] {} CSV file(s), --workers 1 vs 3 byte-identical: {same}",
                if same { "PASS" } else { "FAIL" },
                Criterion::Reproducibility,
                a.len()
            );
            ledger.record(Criterion::Reproducibility, same, tag.clone(), 0.0);
        });
        ledger.outcomes.get_mut(&Criterion::Reproducibility).unwrap().seconds += secs;
    }
}

fn main() -> ExitCode {
    let mut ledger = Ledger::default();
    let seed = DEFAULT_SEED;
    let spec = GridSpec::default();

    for d in [2, 3] {
        println!("d = {d}: solving for h*");
        let (lab, secs) = timed(|| Lab::new(d, spec, BISECTION_TOL));
        let lab = match lab {
            Ok(lab) => lab,
            Err(e) => {
                for c in Criterion::ALL {
                    ledger.fail(c, &format!("d={d} setup"), &e);
                }
                continue;
            }
        };
        println!("  h* = {:.10}, C1 = {:.6}, C2 = {:.6} ({secs:.1}s)", lab.h_star(), lab.critical.c1, lab.critical.c2);

        let tag = format!("spectral d={d}");
        match timed(|| spectral_sanity(&lab, seed)) {
            (Ok(r), s) => ledger.absorb(&tag, &r, s),
            (Err(e), _) => ledger.fail(Criterion::SpectralCorrectness, &tag, e),
        }
        if d != 2 {
            continue;
        }
        match timed(|| branching(&lab, seed)) {
            (Ok(r), s) => ledger.absorb("branching d=2", &r, s),
            (Err(e), _) => ledger.fail(Criterion::OffspringLaw, "branching d=2", e),
        }
        match timed(|| critical_tail(&lab, lab.h_star(), seed)) {
            (Ok(r), s) => ledger.absorb("tail d=2", &r, s),
            (Err(e), _) => ledger.fail(Criterion::CriticalTail, "tail d=2", e),
        }
        match timed(|| laplace_scaling(&lab, &DEFAULT_S_LADDER)) {
            (Ok(r), s) => ledger.absorb("laplace d=2", &r, s),
            (Err(e), _) => ledger.fail(Criterion::LaplaceScaling, "laplace d=2", e),
        }
        match timed(|| near_critical(&lab, &DEFAULT_DELTAS, 0.5, seed)) {
            (Ok(r), s) => ledger.absorb("near-critical d=2", &r, s),
            (Err(e), _) => ledger.fail(Criterion::NearCritical, "near-critical d=2", e),
        }
    }
    println!("reproducibility");
    reproducibility(&mut ledger);

    println!();
    let mut all = true;
    for c in Criterion::ALL {
        match ledger.outcomes.get(&c) {
            Some(o) => {
                all &= o.passed;
                println!(
                    "{} {c} ({}; {:.1}s)",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.notes.join(", "),
                    o.seconds
                );
            }
            None => {
                all = false;
                println!("FAIL {c} (never evaluated)");
            }
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
