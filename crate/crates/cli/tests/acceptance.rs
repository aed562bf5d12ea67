//! Acceptance run: one PASS/FAIL line per criterion, then a summary.
//!
//! The desk-scale criteria build a dataset, train and evaluate through the
//! `gms` binary, which takes several minutes. `GMS_ACCEPTANCE_SKIP_DESK=1`
//! reports them as SKIP instead. The process exits 0 whatever the verdicts
//! unless `GMS_ACCEPTANCE_STRICT=1`, in which case any FAIL exits 1.

#[path = "../../core/tests/common/gradcheck.rs"]
mod gradcheck;
#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use gms_core::bench::BenchTable;
use gms_core::dataset;
use gms_core::daydream::{build_dataset, random_config, EvolutionParams, DEFAULT_HUMAN_TYPES};
use gms_core::diffusion::{make_schedule, reverse_step, sample, SampleRequest, TrainedModel};
use gms_core::domain::{capacity, CapacityClass, Codec, Configuration, SkillProfile};
use gms_core::inquiry::{format_class, parse_inquiry, ConditionClass, GrammarBackend, RemoteBackend, RemoteConfig};
use gms_core::metrics::{fid, fid_features, EvalReport};
use gms_core::nn::checkpoint;
use gms_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    name: &'static str,
    verdict: Verdict,
    detail: String,
    elapsed: Duration,
}

#[derive(Default)]
struct Report {
    lines: Vec<Line>,
}

impl Report {
    /// Runs `check`; a panic counts as a failure with the panic message.
    fn run(&mut self, name: &'static str, check: impl FnOnce() -> (bool, String)) {
        let start = Instant::now();
        let (verdict, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok((true, d)) => (Verdict::Pass, d),
            Ok((false, d)) => (Verdict::Fail, d),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                (Verdict::Fail, format!("panicked: {msg}"))
            }
        };
        self.push(name, verdict, detail, start.elapsed());
    }

    fn skip(&mut self, name: &'static str, why: &str) {
        self.push(name, Verdict::Skip, why.to_string(), Duration::ZERO);
    }

    fn push(&mut self, name: &'static str, verdict: Verdict, detail: String, elapsed: Duration) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        };
        println!("{tag}  {name:<34} {detail}  [{:.2}s]", elapsed.as_secs_f64());
        self.lines.push(Line {
            name,
            verdict,
            detail,
            elapsed,
        });
    }

    fn count(&self, pred: fn(&Verdict) -> bool) -> usize {
        self.lines.iter().filter(|l| pred(&l.verdict)).count()
    }
}

fn under(elapsed: Duration, limit: f64) -> bool {
    elapsed.as_secs_f64() < limit
}

fn schedule_identities() -> (bool, String) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut monotone = true;
    for steps in [100, 400] {
        let s = make_schedule(1e-4, 0.02, steps).unwrap();
        for t in 1..=steps {
            worst = worst.max((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs());
            if t > 1 {
                monotone &= s.alpha(t) < s.alpha(t - 1) && s.sigma(t) > s.sigma(t - 1);
            }
        }
    }
    let elapsed = start.elapsed();
    (
        monotone && worst < 1e-12 && under(elapsed, 1.0),
        format!(
            "max |a^2+s^2-1| = {worst:.1e}, monotone = {monotone}, {:.1} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn gradient_correctness() -> (bool, String) {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (name, case) in gradcheck::cases() {
        let e = case();
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let elapsed = start.elapsed();
    (
        worst.0 < gradcheck::TOLERANCE && under(elapsed, 60.0),
        format!(
            "{} cases, max relative error {:.2e} ({}), {:.1} s",
            gradcheck::cases().len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn sampler_statistics() -> (bool, String) {
    let start = Instant::now();
    let s = make_schedule(1e-4, 0.02, 100).unwrap();
    let draws = 100_000;
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for t in [2usize, 50, 100] {
        let (x, e) = (0.7f32, -0.4f32);
        let beta = s.beta(t);
        let expected = (x as f64 - beta / s.sigma(t) * e as f64) / (1.0 - beta).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + t as u64);
        let out = reverse_step(&vec![x; draws], t, &vec![e; draws], &s, &mut rng);
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / draws as f64;
        let var = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        worst_mean = worst_mean.max((mean - expected).abs() / expected.abs());
        worst_var = worst_var.max((var - beta).abs() / beta);
    }
    let elapsed = start.elapsed();
    (
        worst_mean <= 0.02 && worst_var <= 0.02 && under(elapsed, 30.0),
        format!(
            "relative error: mean {:.2}%, variance {:.2}%",
            worst_mean * 100.0,
            worst_var * 100.0
        ),
    )
}

fn capacity_oracle() -> (bool, String) {
    let start = Instant::now();
    let mut checked = 0;
    let mut mismatches = 0;
    for rates in oracle::RATE_SETS {
        let skills = SkillProfile::new(rates.to_vec());
        for config in oracle::two_by_two() {
            checked += 1;
            if capacity(&config, &skills) != oracle::oracle_capacity(&config, rates) {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    (
        mismatches == 0 && checked == 4 * 81 && under(elapsed, 10.0),
        format!("{checked} configurations under 4 rate sets, {mismatches} mismatches"),
    )
}

fn codec_and_archive() -> (bool, String) {
    let small = Codec::new(4, 2).unwrap();
    let exhaustive = oracle::two_by_two().all(|c| small.decode(&small.encode(&c).unwrap()) == c);

    let codec = Codec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let random_ok = (0..1000).all(|_| {
        let ceiling = rng.gen_range(0..=5);
        let c = random_config(&mut rng, 9, 7, ceiling);
        codec.decode(&codec.encode(&c).unwrap()) == c
    });

    let p = EvolutionParams {
        generations: 4,
        population: 10,
        ..Default::default()
    };
    let ds = build_dataset(3, &p, 21, DEFAULT_HUMAN_TYPES).unwrap();
    let count_ok = ds.len() == 3 * 4 * 10;

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl.gz"), dir.path().join("b.jsonl.gz"));
    dataset::write(&ds, &a).unwrap();
    dataset::write(&build_dataset(3, &p, 21, DEFAULT_HUMAN_TYPES).unwrap(), &b).unwrap();
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    (
        exhaustive && random_ok && count_ok && identical,
        format!(
            "2x2 exhaustive {exhaustive}, 1000 random 9x7 {random_ok}, archive count {count_ok}, byte-identical rerun {identical}"
        ),
    )
}

fn fid_sanity() -> (bool, String) {
    let codec = Codec::default();
    let p = EvolutionParams {
        generations: 10,
        population: 30,
        ..Default::default()
    };
    let ds = build_dataset(10, &p, 4, DEFAULT_HUMAN_TYPES).unwrap();
    let train: Vec<Configuration> = ds.records.iter().map(|r| r.config.clone()).collect();
    let self_fid = fid(&train, &train, &codec).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<Vec<f64>> = (0..150)
        .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let b: Vec<Vec<f64>> = (0..90)
        .map(|_| (0..8).map(|_| rng.gen_range(-0.6..1.4)).collect())
        .collect();
    let (ab, ba) = (fid_features(&a, &b).unwrap(), fid_features(&b, &a).unwrap());
    let symmetric = (ab - ba).abs() <= 1e-9 * ab.max(1.0);

    let (first, second) = train.split_at(train.len() / 2);
    let uniform: Vec<Configuration> = (0..second.len()).map(|_| random_config(&mut rng, 9, 7, 5)).collect();
    let same = fid(first, second, &codec).unwrap();
    let noise = fid(first, &uniform, &codec).unwrap();
    (
        self_fid.abs() < 1e-8 && symmetric && same < noise,
        format!(
            "fid(A,A) = {self_fid:.1e}, |ab-ba| = {:.1e}, train/train {same:.3} < train/uniform {noise:.3}",
            (ab - ba).abs()
        ),
    )
}

fn parser_corpus() -> (bool, String) {
    let corpus: Vec<Value> = include_str!("../../core/tests/data/inquiries.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let exact = corpus
        .iter()
        .filter(|f| {
            parse_inquiry(f["text"].as_str().unwrap())
                .map(|c| format_class(&c) == f["expected"].as_str().unwrap())
                .unwrap_or(false)
        })
        .count();
    let worked = "I need a production line with a minimal capacity of 240 part/hour, using no more than 9 machines.";
    let worked_ok = parse_inquiry(worked).map(|c| format_class(&c)).ok().as_deref() == Some("(240, None, 9)");

    let config = RemoteConfig {
        endpoint: "stub://".into(),
        api_key: None,
        model: "stub".into(),
        timeout: Duration::from_millis(200),
    };
    let down = |_: &RemoteConfig, _: &str, _: &str| Err::<String, _>("connection refused".to_string());
    let remote = RemoteBackend::with_transport(config, true, down);
    use gms_core::inquiry::InquiryBackend;
    let fallback_ok = remote.parse(worked).map(|c| format_class(&c)).ok().as_deref() == Some("(240, None, 9)");
    (
        corpus.len() >= 20 && exact == corpus.len() && worked_ok && fallback_ok,
        format!(
            "{exact}/{} exact, worked example {worked_ok}, remote fallback via stub {fallback_ok}",
            corpus.len()
        ),
    )
}

/// Artifacts of the desk-scale pipeline.
struct Desk {
    dir: PathBuf,
    ckpt: PathBuf,
    train_records: u64,
    losses: Vec<f64>,
    guided: EvalReport,
    unguided: EvalReport,
    elapsed: Duration,
}

const DESK_RUNS: &str = "60";
const DESK_EVAL_N: &str = "50";

fn gms(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_gms"))
        .current_dir(dir)
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("gms runs");
    assert!(status.success(), "gms {args:?} exited with {status}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn desk_pipeline() -> Desk {
    let start = Instant::now();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    eprintln!("desk pipeline in {}", dir.display());
    gms(
        &dir,
        &["daydream", "--out", "desk.jsonl.gz", "--runs", DESK_RUNS, "--seed", "7"],
    );
    gms(
        &dir,
        &[
            "train",
            "--data",
            "desk.jsonl.gz",
            "--out",
            "desk.gms",
            "--T",
            "100",
            "--seed",
            "5",
        ],
    );
    let manifest = read_json(&dir.join("desk.gms.manifest.json"));
    let losses: Vec<f64> = manifest["summary"]["epoch_losses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let train_records = manifest["summary"]["records"].as_u64().unwrap();
    for (out, extra) in [("guided", "--w=2"), ("unguided", "--unguided")] {
        gms(
            &dir,
            &[
                "eval",
                "--ckpt",
                "desk.gms",
                "--data",
                "desk.jsonl.gz",
                "--n",
                DESK_EVAL_N,
                "--seed",
                "11",
                extra,
                "--out",
                out,
            ],
        );
    }
    let report =
        |name: &str| serde_json::from_value::<EvalReport>(read_json(&dir.join(format!("{name}.json")))).unwrap();
    Desk {
        ckpt: dir.join("desk.gms"),
        train_records,
        losses,
        guided: report("guided"),
        unguided: report("unguided"),
        elapsed: start.elapsed(),
        dir,
    }
}

fn desk_loss(d: &Desk) -> (bool, String) {
    let (first, last) = (d.losses[0], *d.losses.last().unwrap());
    let within_budget = d.elapsed.as_secs_f64() <= 30.0 * 60.0;
    (
        d.train_records >= 5000 && last < 0.5 * first && within_budget,
        format!(
            "{} records, T=100, {} epochs, loss {first:.4} -> {last:.4} (ratio {:.3}, need < 0.5), pipeline {:.1} min",
            d.train_records,
            d.losses.len(),
            last / first,
            d.elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn desk_class_zero(d: &Desk) -> (bool, String) {
    let zero = CapacityClass::new(0).unwrap();
    let acc = d.guided.row(zero).unwrap().accu_percent;
    (
        acc >= 80.0,
        format!("guided w=2 Accu for class 0 = {acc:.1}% (need >= 80%)"),
    )
}

fn desk_guidance(d: &Desk) -> (bool, String) {
    let (g, u) = (d.guided.mean_accuracy(), d.unguided.mean_accuracy());
    let wins = d
        .guided
        .rows
        .iter()
        .zip(&d.unguided.rows)
        .filter(|(a, b)| a.accu_percent > b.accu_percent)
        .count();
    (
        g > u,
        format!(
            "mean Accu guided {g:.1}% vs unguided {u:.1}%, guided higher in {wins}/{} classes",
            d.guided.rows.len()
        ),
    )
}

fn desk_duplication(d: &Desk) -> (bool, String) {
    let worst = d.guided.rows.iter().map(|r| r.dr_permille).fold(0.0, f64::max);
    let mean = d.guided.rows.iter().map(|r| r.dr_permille).sum::<f64>() / d.guided.rows.len() as f64;
    (
        worst <= 50.0,
        format!("guided DR max {worst:.1} per mille, mean {mean:.1} (need <= 50)"),
    )
}

fn responsiveness_ratio(d: &Desk) -> (bool, String) {
    gms(
        &d.dir,
        &[
            "bench",
            "--ckpt",
            "desk.gms",
            "--targets",
            "240",
            "--algos",
            "ga,diffusion",
            "--repeats",
            "5",
            "--timeout",
            "30",
            "--seed",
            "3",
            "--out",
            "bench.csv",
        ],
    );
    let table: BenchTable =
        serde_json::from_value(read_json(&d.dir.join("bench.csv.manifest.json"))["summary"].clone()).unwrap();
    let t240 = CapacityClass::new(240).unwrap();
    let ga = table.cell("ga".parse().unwrap(), t240).unwrap();
    let diff = table.cell("diffusion".parse().unwrap(), t240).unwrap();
    let ratio = ga.mean_elapsed / diff.mean_elapsed;
    (
        ratio >= 10.0 && diff.successes > 0,
        format!(
            "target 240 over 5 repeats: GA {:.5} s ({}/5 found), diffusion {:.4} s ({}/5 found), GA/diffusion = {ratio:.4} (need >= 10)",
            ga.mean_elapsed, ga.successes, diff.mean_elapsed, diff.successes
        ),
    )
}

fn per_sample_time(d: &Desk) -> (bool, String) {
    let (denoiser, meta) = checkpoint::load::<f32>(&d.ckpt).unwrap();
    let model = TrainedModel { denoiser, meta };
    let schedule = model.schedule().unwrap();
    let req = |seed| SampleRequest {
        class: CapacityClass::new(240).unwrap(),
        w: 2.0,
        count: 32,
        seed,
        snapshot_steps: Vec::new(),
    };
    // warm-up
    sample(&model, &schedule, &req(0), &model.meta.codec, &model.meta.bounds).unwrap();
    let start = Instant::now();
    let rounds = 3;
    for seed in 1..=rounds {
        sample(&model, &schedule, &req(seed), &model.meta.codec, &model.meta.bounds).unwrap();
    }
    let per = start.elapsed().as_secs_f64() / (rounds as f64 * 32.0);
    (
        schedule.steps() == 100 && per < 0.1,
        format!("{:.1} ms per sample at T=100, w=2 (need < 100 ms)", per * 1e3),
    )
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn service_contract(d: &Desk) -> (bool, String) {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    rt.block_on(async {
        let state = AppState::new(ServiceConfig::default(), Arc::new(GrammarBackend));
        let mut failures: Vec<String> = Vec::new();
        let mut check = |ok: bool, what: &str| {
            if !ok {
                failures.push(what.to_string());
            }
        };

        // checkpoint handling
        let dir = tempfile::tempdir().unwrap();
        let bytes = std::fs::read(&d.ckpt).unwrap();
        let cut = dir.path().join("cut.gms");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let (st, v) = call(&state, "POST", "/api/model/load", Some(json!({ "path": cut }))).await;
        check(st == StatusCode::BAD_REQUEST && v["message"].as_str().unwrap_or("").contains("truncated"), "truncated checkpoint is a 400 naming the section");
        let bad_magic = dir.path().join("magic.gms");
        let mut flipped = bytes.clone();
        flipped[0] = b'X';
        std::fs::write(&bad_magic, flipped).unwrap();
        let (st, v) = call(&state, "POST", "/api/model/load", Some(json!({ "path": bad_magic }))).await;
        check(st == StatusCode::BAD_REQUEST && v["message"].as_str().unwrap_or("").contains("magic"), "bad magic is a 400");
        let (st, _) = call(&state, "POST", "/api/sample", Some(json!({ "triple": "(240, None, None)" }))).await;
        check(st == StatusCode::CONFLICT, "no model loaded is a 409");
        let (st, v) = call(&state, "POST", "/api/model/load", Some(json!({ "path": d.ckpt }))).await;
        check(st == StatusCode::OK && v["steps"] == 100, "desk checkpoint loads");

        // merge idempotence
        let worked = "I need a production line with a minimal capacity of 240 part/hour, using no more than 9 machines.";
        let (_, v) = call(&state, "POST", "/api/inquiry", Some(json!({ "text": worked }))).await;
        check(v["triple"] == "(240, None, 9)", "worked example parses");
        let sid = v["session_id"].clone();
        let refine = json!({ "text": "actually at most 40 machines", "session_id": sid });
        let (_, first) = call(&state, "POST", "/api/inquiry", Some(refine.clone())).await;
        let (_, again) = call(&state, "POST", "/api/inquiry", Some(refine)).await;
        check(first["triple"] == "(240, None, 40)" && again["triple"] == first["triple"], "merge is idempotent");

        // revalidation and ranking
        let reference = SkillProfile::reference(9, DEFAULT_HUMAN_TYPES);
        let mut returned = 0;
        for triple in ["(240, None, 40)", "(0, None, None)", "(120, high, 30)", "(300, low, None)"] {
            let body = json!({ "triple": triple, "count": 5, "w": 2.0, "seed": 12 });
            let (st, v) = call(&state, "POST", "/api/sample", Some(body.clone())).await;
            let (_, repeat) = call(&state, "POST", "/api/sample", Some(body)).await;
            check(st == StatusCode::OK, "sample succeeds");
            check(v["decisions"] == repeat["decisions"], "seeded sampling is deterministic");
            let want: ConditionClass = triple.parse().unwrap();
            let class = CapacityClass::from_throughput(want.capacity.unwrap());
            let decisions = v["decisions"].as_array().cloned().unwrap_or_default();
            returned += decisions.len();
            let mut prev: Option<(f64, u64, u64)> = None;
            for dec in &decisions {
                let c: Configuration = serde_json::from_value(dec["config"].clone()).unwrap();
                let cap = capacity(&c, &reference);
                check(dec["capacity"] == cap, "capacity re-derives");
                check(dec["satisfies"]["capacity"] == (cap == class.value()), "capacity flag re-derives");
                if let Some(m) = want.max_machines {
                    check(c.total_assets() <= m, "machine ceiling holds");
                }
                if let Some(level) = want.skill {
                    let mut rates = reference.rates.clone();
                    rates[9 - DEFAULT_HUMAN_TYPES..].fill(level.rate());
                    check(capacity(&c, &SkillProfile::new(rates)) >= class.value(), "skill feasibility holds");
                }
                let key = (
                    dec["fitness"].as_f64().unwrap(),
                    dec["total_assets"].as_u64().unwrap(),
                    dec["id"].as_u64().unwrap(),
                );
                if let Some(p) = prev {
                    check(p.0 > key.0 || (p.0 == key.0 && (p.1, p.2) < (key.1, key.2)), "ranking order");
                }
                prev = Some(key);
            }
        }
        check(returned > 0, "some decisions returned");
        failures.sort();
        failures.dedup();
        (
            failures.is_empty(),
            if failures.is_empty() {
                format!("load/corruption, merge idempotence, revalidation and ranking green on the desk model ({returned} decisions checked)")
            } else {
                format!("violated: {}", failures.join("; "))
            },
        )
    })
}

fn main() {
    // the harness is a plain binary; `cargo test -- <filter>` arguments are ignored
    let mut report = Report::default();
    println!("acceptance criteria");
    report.run("schedule identities", schedule_identities);
    report.run("gradient correctness", gradient_correctness);
    report.run("sampler statistics", sampler_statistics);
    report.run("capacity oracle equivalence", capacity_oracle);
    report.run("codec and archive invariants", codec_and_archive);

    let desk_names = [
        "desk training: loss trend",
        "desk training: class 0 accuracy",
        "desk training: guided beats unguided",
        "desk training: duplication rate",
        "responsiveness: vs GA",
        "responsiveness: per-sample time",
        "service contract suite",
    ];
    if std::env::var("GMS_ACCEPTANCE_SKIP_DESK").is_ok_and(|v| v == "1") {
        for name in desk_names {
            report.skip(name, "GMS_ACCEPTANCE_SKIP_DESK=1");
        }
    } else {
        match catch_unwind(desk_pipeline) {
            Ok(desk) => {
                report.run(desk_names[0], || desk_loss(&desk));
                report.run(desk_names[1], || desk_class_zero(&desk));
                report.run(desk_names[2], || desk_guidance(&desk));
                report.run(desk_names[3], || desk_duplication(&desk));
                report.run(desk_names[4], || responsiveness_ratio(&desk));
                report.run(desk_names[5], || per_sample_time(&desk));
                report.run(desk_names[6], || service_contract(&desk));
            }
            Err(_) => {
                for name in desk_names {
                    report.run(name, || (false, "desk pipeline failed; see stderr".into()));
                }
            }
        }
    }

    report.run("FID sanity", fid_sanity);
    report.run("parser fixture corpus", parser_corpus);

    let (pass, fail, skip) = (
        report.count(|v| matches!(v, Verdict::Pass)),
        report.count(|v| matches!(v, Verdict::Fail)),
        report.count(|v| matches!(v, Verdict::Skip)),
    );
    let total: f64 = report.lines.iter().map(|l| l.elapsed.as_secs_f64()).sum();
    println!("summary: {pass} passed, {fail} failed, {skip} skipped in {total:.1}s");
    for l in report.lines.iter().filter(|l| matches!(l.verdict, Verdict::Fail)) {
        println!("  failed: {}: {}", l.name, l.detail);
    }
    if fail > 0 && std::env::var("GMS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
