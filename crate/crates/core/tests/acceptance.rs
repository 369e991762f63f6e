//! Acceptance suite: runs the twelve release criteria and prints one
//! `PASS` or `FAIL` line per criterion. Pass criterion numbers as arguments
//! to run a subset. Exits nonzero when any selected criterion fails.

use std::sync::Arc;
use std::time::Instant;

use corrdemo::exact::{floor_log, int, ratio, to_f64};
use corrdemo::experiments::{run_experiment, ExperimentConfig, ExperimentOutput};
use corrdemo::instances::{cloning_report, default_cloning_estimators, majority_lb, passk_lb_online};
use corrdemo::model::ContextId;
use corrdemo::sim::{run_online, LearnerSpec, RunOptions, SequenceSource};
use corrdemo::weights::{EvalMode, Hyperparams, ModeAudit};

const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn from_output(out: &ExperimentOutput) -> Outcome {
    let failures = out.failures();
    let detail = match failures.first() {
        None => format!("{} rows, worst slack {:?}", out.rows.len(), out.worst_slack()),
        Some(r) => format!(
            "{} of {} rows failed; first: {} {} {}={} observed {} bound {}",
            failures.len(),
            out.rows.len(),
            r.learner,
            r.metric,
            r.param_name,
            r.param,
            r.observed,
            r.bound
        ),
    };
    Outcome { pass: out.pass(), detail }
}

fn merge(outs: &[Outcome]) -> Outcome {
    Outcome {
        pass: outs.iter().all(|o| o.pass),
        detail: outs.iter().map(|o| o.detail.as_str()).collect::<Vec<_>>().join("; "),
    }
}

fn cfg(experiment: &str) -> ExperimentConfig {
    ExperimentConfig { seed: SEED, ..ExperimentConfig::named(experiment) }
}

struct Suite {
    audits: Vec<(u64, u64)>,
}

impl Suite {
    fn run(&mut self, c: &ExperimentConfig) -> ExperimentOutput {
        let out = run_experiment(c).unwrap_or_else(|e| panic!("{} failed to run: {e}", c.experiment));
        self.audits.push((out.audit.comparisons, out.audit.disagreements));
        out
    }

    fn criterion1(&mut self) -> Outcome {
        let mut c = cfg("run-online");
        c.instance = Some("random:S=2..1024,X=2..8,Y=2..5".into());
        c.learner = Some("alg1:realizable".into());
        c.trials = 200;
        c.budget = 2000;
        let searched = from_output(&self.run(&c));

        // Scripted lower-bound streams: the Majority construction and the
        // revealing adversary on product classes.
        let audit = ModeAudit::new();
        let learner = LearnerSpec::Weighted(Hyperparams::realizable());
        let mut ok = true;
        let mut runs = 0;
        for d in [3, 5, 9, 33, 101, 1025] {
            let inst = majority_lb(d).expect("valid d");
            let q = inst.class.num_contexts();
            let script = (0..3 * q).map(|t| (ContextId(t % q), None)).collect();
            let opts = RunOptions { mode: EvalMode::Audited(Arc::clone(&audit)), ..Default::default() };
            let run = run_online(&inst, &learner, SequenceSource::Scripted(script), &opts).expect("scripted run");
            ok &= run.summary.mistakes <= floor_log(2, inst.class.len() as u64) as u64 && run.summary.monotone_ok;
            runs += 1;
        }
        for d in [2, 4, 16, 100, 1000] {
            let inst = passk_lb_online(1, d).expect("valid d");
            let nx = inst.class.num_contexts();
            let adv = corrdemo::sim::RevealingAdversary { num_contexts: nx, num_actions: 2 };
            let opts = RunOptions { mode: EvalMode::Audited(Arc::clone(&audit)), ..Default::default() };
            let run = run_online(&inst, &learner, SequenceSource::Adversarial(Box::new(adv)), &opts).expect("revealing run");
            ok &= run.summary.mistakes <= floor_log(2, inst.class.len() as u64) as u64;
            runs += 1;
        }
        self.audits.push((audit.comparisons(), audit.disagreements()));
        merge(&[searched, Outcome { pass: ok, detail: format!("{runs} scripted lower-bound runs within bound: {ok}") }])
    }

    fn criterion2(&mut self) -> Outcome {
        let mut c = cfg("sweep");
        c.learner = Some("ci".into());
        c.instance = Some("random:X=2..6,Y=2..4".into());
        c.grid = vec![2, 3, 4, 6, 8, 12, 16, 32];
        c.trials = 25;
        c.budget = 50;
        let ci = from_output(&self.run(&c));
        let mut c = cfg("run-lower-bounds");
        c.d = vec![3, 5, 9, 33, 101];
        c.grid = vec![1];
        c.trials = 1;
        c.k = vec![1];
        let out = self.run(&c);
        let rows: Vec<_> = out.rows.iter().filter(|r| r.metric == "online_mistakes").collect();
        let exact = rows.iter().all(|r| r.pass && r.observed_f64 == ((r.param - 1) / 2) as f64);
        let lb = Outcome {
            pass: exact && rows.len() == 5,
            detail: format!(
                "majority mistakes {:?}",
                rows.iter().map(|r| (r.param, r.observed.clone())).collect::<Vec<_>>()
            ),
        };
        merge(&[ci, lb])
    }

    fn criterion3(&mut self) -> Outcome {
        let mut c = cfg("run-lower-bounds");
        c.d = vec![33];
        c.grid = (1..=8).collect();
        c.trials = 1000;
        c.k = vec![1];
        let out = self.run(&c);
        let stat: Vec<_> = out.rows.iter().filter(|r| r.metric == "statistical_loss").collect();
        let pass = stat.len() == 8000 && stat.iter().all(|r| r.pass) && out.pass();
        let min = stat.iter().map(|r| r.observed_f64).fold(f64::INFINITY, f64::min);
        Outcome { pass, detail: format!("{} datasets, minimum exact loss {min}", stat.len()) }
    }

    fn criterion4_and_10(&mut self) -> (Outcome, Outcome) {
        let grid = vec![1, 2, 4, 8, 16, 32, 64, 128];
        let mut outs = Vec::new();
        let mut c = cfg("run-batch");
        c.instance = Some("majority_lb:d=33".into());
        c.grid = grid.clone();
        c.trials = 400;
        outs.push(self.run(&c));
        let mut exact_rows = 0;
        for i in 0..20u64 {
            let mut c = cfg("run-batch");
            c.seed = SEED + 1 + i;
            c.instance = Some("random:S=2..64,X=2..4,Y=2..4".into());
            c.grid = grid.clone();
            c.trials = 400;
            let out = self.run(&c);
            exact_rows += out.rows.iter().filter(|r| r.metric == "exact_expected_loss").count();
            outs.push(out);
        }
        let c4: Vec<Outcome> = outs.iter().map(from_output).collect();
        let mut c4 = merge(&c4);
        c4.pass &= exact_rows > 0;
        c4.detail = format!("21 instances, {exact_rows} exact-enumeration rows; {}", short(&c4.detail));

        let mut rewards = Vec::new();
        for i in 0..50u64 {
            let mut c = cfg("run-batch");
            c.seed = SEED + 100 + i;
            c.instance = Some("reward:X=2..5,Y=2..4,R=2..12".into());
            c.grid = grid.clone();
            c.trials = 20;
            rewards.push(self.run(&c));
        }
        let value_rows: usize = rewards.iter().map(|o| o.rows.iter().filter(|r| r.metric == "value").count()).sum();
        let c10 = merge(&rewards.iter().map(from_output).collect::<Vec<_>>());
        (c4, Outcome { pass: c10.pass && value_rows == 50 * 8 * 20, detail: format!("{value_rows} trained policies; {}", short(&c10.detail)) })
    }

    fn criterion5(&mut self) -> Outcome {
        let mut c = cfg("run-mle-failure");
        c.grid = (1..=50).collect();
        c.gamma = vec!["1/10".into(), "1/4".into(), "1/2".into()];
        c.trials = 20;
        from_output(&self.run(&c))
    }

    fn criterion6_7(&mut self, which: &str) -> Outcome {
        let mut c = cfg("run-mle-overlap");
        c.which = Some(which.into());
        c.trials = 500;
        c.epsilon = "1/5".into();
        c.delta = "1/10".into();
        let out = self.run(&c);
        let agg: Vec<_> = out.rows.iter().filter(|r| r.trial.is_none()).map(|r| format!("{}@{}={}", r.metric, r.param, r.observed)).collect();
        Outcome { pass: out.pass(), detail: agg.join(", ") }
    }

    fn criterion8(&mut self) -> Outcome {
        let mut c = cfg("run-passk");
        c.instance = Some("random:S=2..1024,X=2..6,Y=6..8".into());
        c.k = vec![1, 2, 3, 5];
        c.trials = 50;
        c.budget = 200;
        c.d = vec![2, 4, 16, 100, 1000];
        from_output(&self.run(&c))
    }

    fn criterion9(&mut self) -> Outcome {
        let mut c = cfg("run-agnostic");
        c.runs = Some(100);
        c.trials = 500;
        c.grid = vec![100];
        c.delta = "1/10".into();
        let out = self.run(&c);
        let rate = out.rows.iter().find(|r| r.metric == "sqrt_bound_violation_rate").map(|r| r.observed.clone());
        let mut o = from_output(&out);
        o.detail = format!("violation rate {rate:?}; {}", o.detail);
        o
    }

    fn criterion11(&self) -> Outcome {
        let comparisons: u64 = self.audits.iter().map(|a| a.0).sum();
        let disagreements: u64 = self.audits.iter().map(|a| a.1).sum();
        Outcome {
            pass: comparisons > 0 && disagreements == 0,
            detail: format!("{comparisons} audited argmax comparisons, {disagreements} disagreements"),
        }
    }

    fn criterion12(&mut self) -> Outcome {
        let report = cloning_report(2, &default_cloning_estimators()).expect("report");
        let mut pass = true;
        let mut parts = Vec::new();
        for r in &report {
            if r.estimator.starts_with("constant") {
                pass &= r.mean_tv >= ratio(1, 4);
            }
            pass &= r.loss == int(0);
            parts.push(format!("{}: tv={} loss={}", r.estimator, to_f64(&r.mean_tv), r.loss));
        }
        let mut c = cfg("run-cloning-report");
        c.grid = vec![2];
        let out = self.run(&c);
        Outcome { pass: pass && out.pass() && report.iter().any(|r| r.estimator.starts_with("constant")), detail: parts.join(", ") }
    }
}

fn short(s: &str) -> String {
    s.chars().take(300).collect()
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut suite = Suite { audits: Vec::new() };
    let mut all = true;
    let mut report = |n: u32, name: &str, started: Instant, o: Outcome| {
        all &= o.pass;
        println!(
            "{} criterion {n:>2} ({name}) [{:.1}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            o.detail
        );
    };
    if want(1) {
        let t = Instant::now();
        let o = suite.criterion1();
        report(1, "realizable online mistake bound", t, o);
    }
    if want(2) {
        let t = Instant::now();
        let o = suite.criterion2();
        report(2, "majority and intersection online bounds", t, o);
    }
    if want(3) {
        let t = Instant::now();
        let o = suite.criterion3();
        report(3, "majority statistical lower bound", t, o);
    }
    if want(4) || want(10) {
        let t = Instant::now();
        let (c4, c10) = suite.criterion4_and_10();
        if want(4) {
            report(4, "online-to-batch expected loss", t, c4);
        }
        if want(10) {
            report(10, "bounded-reward reduction", t, c10);
        }
    }
    if want(5) {
        let t = Instant::now();
        let o = suite.criterion5();
        report(5, "likelihood maximization failures", t, o);
    }
    if want(6) {
        let t = Instant::now();
        let o = suite.criterion6_7("overlap");
        report(6, "likelihood maximizer overlap", t, o);
    }
    if want(7) {
        let t = Instant::now();
        let o = suite.criterion6_7("positive");
        report(7, "likelihood positive control", t, o);
    }
    if want(8) {
        let t = Instant::now();
        let o = suite.criterion8();
        report(8, "k-list upper and lower bounds", t, o);
    }
    if want(9) {
        let t = Instant::now();
        let o = suite.criterion9();
        report(9, "agnostic weights, regret and square-root bound", t, o);
    }
    if want(11) {
        let t = Instant::now();
        let o = suite.criterion11();
        report(11, "exact and log-float argmax agreement", t, o);
    }
    if want(12) {
        let t = Instant::now();
        let o = suite.criterion12();
        report(12, "cloning impossibility report", t, o);
    }
    if !all {
        std::process::exit(1);
    }
}
