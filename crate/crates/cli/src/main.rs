use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ddse::harness::{compare, run_scenario, write_artifacts, CompareMode, CompareTable, Scenario};

#[derive(Parser)]
#[command(name = "ddse", about = "Dynamic distribution state estimation scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write errors.csv, run.jsonl and summary.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a set of variants of a base scenario and tabulate them.
    Compare {
        /// fixed_C, fixed_time or pmu_sweep
        #[arg(long)]
        mode: String,
        #[arg(long)]
        base: PathBuf,
        /// JSON array of scenario overrides, inline or as a file path.
        #[arg(long)]
        sweep: String,
        /// Optional directory for compare.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long = "P")]
    p: Option<usize>,
    #[arg(long = "C")]
    c: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long = "reg-a")]
    reg_a: Option<f64>,
    #[arg(long)]
    wv: Option<f64>,
    #[arg(long = "sigma-v")]
    sigma_v: Option<f64>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated node ids.
    #[arg(long = "pmu-nodes", value_delimiter = ',')]
    pmu_nodes: Option<Vec<u32>>,
}

impl Overrides {
    fn patch(&self) -> Value {
        let mut p = json!({});
        let mut set = |path: &[&str], v: Value| {
            let mut cur = &mut p;
            for key in &path[..path.len() - 1] {
                cur = cur.as_object_mut().unwrap().entry(*key).or_insert(json!({}));
            }
            cur[path[path.len() - 1]] = v;
        };
        if let Some(v) = self.p {
            set(&["fopc", "P"], json!(v));
        }
        if let Some(v) = self.c {
            set(&["fopc", "C"], json!(v));
        }
        if let Some(v) = self.alpha {
            set(&["fopc", "alpha"], json!(v));
        }
        if let Some(v) = self.beta {
            set(&["fopc", "beta"], json!(v));
        }
        if let Some(v) = self.gamma {
            set(&["fopc", "gamma"], json!(v));
        }
        if let Some(v) = self.h {
            set(&["sensing", "h"], json!(v));
        }
        if let Some(v) = self.sigma_v {
            set(&["sensing", "sigma_v"], json!(v));
        }
        if let Some(v) = self.window {
            set(&["sensing", "window"], json!(v));
        }
        if let Some(v) = self.delta {
            set(&["cost", "delta"], json!(v));
        }
        if let Some(v) = self.reg_a {
            set(&["cost", "reg_a"], json!(v));
        }
        if let Some(v) = self.wv {
            set(&["cost", "w_v"], json!(v));
        }
        if let Some(v) = self.steps {
            set(&["steps"], json!(v));
        }
        if let Some(v) = self.seed {
            set(&["seed"], json!(v));
        }
        if let Some(v) = &self.pmu_nodes {
            set(&["selection", "pmu_nodes"], json!(v));
        }
        p
    }

    fn apply(&self, s: &Scenario) -> Result<Scenario> {
        Ok(s.with_overrides(&self.patch())?)
    }
}

fn print_table(t: &CompareTable) {
    println!(
        "{:<28} {:>3} {:>3} {:>4} {:>12} {:>12} {:>12} {:>10} {:>8}",
        "variant", "P", "C", "PMU", "tracking", "u_err", "v_err", "cycle_ms", "tau0"
    );
    for r in &t.rows {
        let matched = match r.cost_matched {
            Some(true) => " (cost matched)",
            Some(false) => " (cost NOT matched)",
            None => "",
        };
        println!(
            "{:<28} {:>3} {:>3} {:>4} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.4} {:>8.4}{}",
            r.overrides.to_string(),
            r.p,
            r.c,
            r.pmu_count,
            r.steady_state.tracking,
            r.steady_state.u_err,
            r.steady_state.v_err,
            r.cycle_ms,
            r.tau0,
            matched
        );
    }
    match &t.verdict {
        Some(v) => println!(
            "verdict: {} -> {}",
            v.claim,
            if v.holds { "holds" } else { "does not hold" }
        ),
        None => println!("verdict: none (single variant)"),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            out,
            overrides,
        } => {
            let s = overrides
                .apply(&Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?)?;
            let run = run_scenario(&s)?;
            write_artifacts(&run, &out)?;
            let ss = &run.summary.steady_state;
            println!(
                "scenario {} | tau0 {:.4} ({}) | steady state: tracking {:.4e}, u_err {:.4e}, v_err {:.4e}, step {:.4} ms",
                &run.summary.scenario_hash[..12],
                run.summary.certificate.tau0,
                if run.summary.certificate.valid { "valid" } else { "INVALID" },
                ss.tracking,
                ss.u_err,
                ss.v_err,
                ss.step_ms_mean
            );
            println!("wrote {}", out.display());
        }
        Command::Compare {
            mode,
            base,
            sweep,
            out,
            overrides,
        } => {
            let mode: CompareMode = mode.parse()?;
            let base =
                overrides.apply(&Scenario::load(&base).with_context(|| format!("loading {}", base.display()))?)?;
            let text = match fs::read_to_string(&sweep) {
                Ok(t) => t,
                Err(_) => sweep.clone(),
            };
            let variants: Value = serde_json::from_str(&text).context("parsing --sweep")?;
            let Value::Array(variants) = variants else {
                bail!("--sweep must be a JSON array of overrides");
            };
            let table = compare(mode, &base, &variants)?;
            print_table(&table);
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("compare.json"), serde_json::to_string_pretty(&table)?)?;
            }
        }
    }
    Ok(())
}
