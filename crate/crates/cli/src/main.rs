//! `bhm`: config-driven runner for envelopes, balayage, oracles and paths.
//! Writes CSV and JSON only; identical config and seed give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use bhm_core::config::{Prepared, RunConfig};
use bhm_core::envelope::{
    balayage_step, build_branched_witness, iterate_envelopes, unbranched_envelope, EnvelopeSequence, Grid, GridSpec,
};
use bhm_core::geometry::Point;
use bhm_core::harmonic::{poisson_ball_eval, wos_harmonic_eval, BoundaryData, WosConfig};
use bhm_core::majorant::dump_tree;
use bhm_core::oracle::{cross_validate, psor_obstacle_solve, radial_on_cartesian, radial_value_oracle, OracleDistance};
use bhm_core::pathsim::{algorithm1_payoff, run_algorithm1_path};
use bhm_core::Error;
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "bhm", version, about = "Iterated harmonic envelopes and optimal stopping in the unit ball")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output` or `out/<name>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the path-simulation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Unbranched envelope, iterated envelopes and contact sets.
    Envelope,
    /// Balayage of the unbranched envelope onto its non-contact set, and the limit.
    Balayage,
    /// Branched witnesses and Algorithm 1 runs at the configured probes.
    Paths,
    /// Radial and obstacle-solver oracles, compared with the envelope limit.
    Oracle,
    /// Reproduce a worked construction.
    Reproduce {
        #[command(subcommand)]
        which: Reproduce,
    },
    /// Fast internal consistency checks.
    Selftest,
}

#[derive(Subcommand)]
enum Reproduce {
    /// Spiked gain: the unbranched envelope is not the value function.
    SpikedBall,
}

/// Failure with its process exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Input(_) | Error::Degenerate(_) => 2,
            Error::Structural(_) | Error::NoWitness(_) | Error::Precondition(_) => 4,
            Error::NonConvergence { .. } | Error::NonTermination { .. } => 5,
        };
        Fail { code, msg: e.to_string() }
    }
}

fn config_error(e: Error) -> Fail {
    Fail { code: 2, msg: e.to_string() }
}

fn io(path: &Path, e: std::io::Error) -> Fail {
    Fail { code: 1, msg: format!("{}: {e}", path.display()) }
}

type CliResult<T> = std::result::Result<T, Fail>;

struct Ctx {
    cfg: RunConfig,
    prep: Prepared,
    out: PathBuf,
}

impl Ctx {
    fn load(cli: &Cli) -> CliResult<Self> {
        let path = cli.config.as_ref().ok_or(Fail { code: 2, msg: "--config is required".into() })?;
        let mut cfg = RunConfig::load(path).map_err(config_error)?;
        if let Some(s) = cli.seed {
            cfg.paths.seed = s;
        }
        let prep = cfg.prepare().map_err(config_error)?;
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.output.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
        fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
        Ok(Self { cfg, prep, out })
    }

    fn write(&self, name: &str, text: &str) -> CliResult<()> {
        let p = self.out.join(name);
        fs::write(&p, text).map_err(|e| io(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(v).map_err(|e| Fail { code: 1, msg: e.to_string() })?;
        s.push('\n');
        self.write(name, &s)
    }

    fn sequence(&self) -> CliResult<EnvelopeSequence> {
        let w1 = unbranched_envelope(
            &self.prep.gain,
            &self.prep.constants,
            self.prep.grid.clone(),
            &self.cfg.envelope.dictionary,
        )?;
        Ok(iterate_envelopes(&self.prep.gain, w1, &self.cfg.envelope.iteration())?)
    }
}

fn cmd_envelope(ctx: &Ctx) -> CliResult<()> {
    let seq = ctx.sequence()?;
    let grid = seq.grid().clone();
    ctx.write("w1.csv", &seq.w1.field.to_csv())?;
    for (k, lv) in seq.levels.iter().enumerate() {
        if k > 0 {
            ctx.write(&format!("u_{}.csv", k + 1), &lv.field.to_csv())?;
        }
        ctx.write(&format!("contact_{}.csv", k + 1), &lv.contact.to_csv(&grid))?;
    }
    if seq.levels.len() > 1 {
        ctx.write("limit.csv", &seq.limit.to_csv())?;
    }
    ctx.write_json(
        "summary.json",
        &json!({ "name": ctx.cfg.name, "converged": seq.converged, "levels": seq.summary() }),
    )?;
    println!("envelope: {} level(s), converged={}", seq.levels.len(), seq.converged);
    if !seq.converged && ctx.cfg.envelope.max_iter > 0 {
        return Err(Fail { code: 5, msg: format!("no convergence within {} refinements", ctx.cfg.envelope.max_iter) });
    }
    Ok(())
}

#[derive(Serialize)]
struct GapReport {
    annular_nodes: usize,
    gap_nodes: usize,
    max_gap: f64,
    max_gap_radius: f64,
}

fn gap_report(seq: &EnvelopeSequence, bal: &[f64], margin: f64) -> GapReport {
    let lv = &seq.levels[0];
    let grid = seq.grid();
    let mut rep = GapReport { annular_nodes: 0, gap_nodes: 0, max_gap: 0.0, max_gap_radius: 0.0 };
    for k in 0..grid.len() {
        if lv.contact.labels[k] < 0 {
            continue;
        }
        rep.annular_nodes += 1;
        let gap = lv.field.values[k] - bal[k];
        if gap > margin {
            rep.gap_nodes += 1;
        }
        if gap > rep.max_gap {
            rep.max_gap = gap;
            rep.max_gap_radius = grid.radius(k);
        }
    }
    rep
}

fn cmd_balayage(ctx: &Ctx) -> CliResult<()> {
    let seq = ctx.sequence()?;
    let lv = &seq.levels[0];
    let bal = balayage_step(&lv.field, &lv.contact, 1)?;
    ctx.write("w1.csv", &lv.field.to_csv())?;
    ctx.write("contact_1.csv", &lv.contact.to_csv(seq.grid()))?;
    ctx.write("balayage_1.csv", &bal.to_csv())?;
    ctx.write("limit.csv", &seq.limit.to_csv())?;
    let rep = gap_report(&seq, &bal.values, ctx.cfg.reproduce.margin);
    ctx.write_json("balayage.json", &json!({ "gap": rep, "converged": seq.converged }))?;
    println!("balayage: max gap {:.6} over {} non-contact nodes", rep.max_gap, rep.annular_nodes);
    Ok(())
}

/// Oracles requested by the config, on the envelope grid.
fn oracles(ctx: &Ctx, seq: &EnvelopeSequence) -> CliResult<Vec<(String, bhm_core::envelope::GridField)>> {
    let mut out = Vec::new();
    let o = &ctx.cfg.oracle;
    if o.radial {
        if !ctx.prep.gain.is_radial() {
            return Err(Fail { code: 2, msg: "radial oracle requested for a non-radial gain".into() });
        }
        match &**seq.grid() {
            Grid::Radial(rg) => {
                let p = radial_value_oracle(&ctx.prep.gain, rg)?;
                out.push(("radial".to_string(), p.into_field(seq.grid().clone())?));
            }
            Grid::Cartesian(_) => {
                let fine = GridSpec::Radial { nodes: 4096, r_min: 1e-4 }.build(ctx.cfg.dim)?;
                let Grid::Radial(rg) = &fine else { unreachable!() };
                let p = radial_value_oracle(&ctx.prep.gain, rg)?;
                out.push(("radial".to_string(), radial_on_cartesian(&p, ctx.cfg.dim, seq.grid().clone())?));
            }
        }
    }
    if o.psor {
        let sol = psor_obstacle_solve(&ctx.prep.gain, &o.psor_spec())?;
        println!("psor: {} sweeps, complementarity residual {:.3e}", sol.sweeps, sol.residual);
        out.push(("psor".to_string(), sol.field));
    }
    Ok(out)
}

fn cmd_oracle(ctx: &Ctx) -> CliResult<()> {
    let seq = ctx.sequence()?;
    let fields = oracles(ctx, &seq)?;
    if fields.is_empty() {
        return Err(Fail { code: 3, msg: "no oracle enabled in the config".into() });
    }
    let mut report: Vec<OracleDistance> = Vec::new();
    for (name, f) in &fields {
        ctx.write(&format!("oracle_{name}.csv"), &f.to_csv())?;
        let d = cross_validate(&seq.limit, f, name)?;
        println!("oracle {name}: sup {:.3e}, rms {:.3e}", d.sup, d.l2);
        report.push(d);
    }
    ctx.write_json("oracle_report.json", &json!({ "converged": seq.converged, "distances": report }))
}

fn cmd_reproduce_spiked(ctx: &Ctx) -> CliResult<()> {
    if !matches!(&*ctx.prep.grid, Grid::Radial(_)) {
        return Err(Fail { code: 2, msg: "reproduce spiked-ball needs a radial grid".into() });
    }
    let seq = ctx.sequence()?;
    let lv = &seq.levels[0];
    let bal = balayage_step(&lv.field, &lv.contact, 1)?;
    let rep = gap_report(&seq, &bal.values, ctx.cfg.reproduce.margin);
    ctx.write("balayage_1.csv", &bal.to_csv())?;
    let oracle = if ctx.cfg.oracle.radial { oracles(ctx, &seq)?.into_iter().find(|(n, _)| n == "radial") } else { None };
    let mut csv = String::from("# units: r in unit-ball radii; g, w1, V in gain units\nr,g,w1,V\n");
    for k in 0..seq.grid().len() {
        let v = oracle.as_ref().map_or(String::new(), |(_, f)| f.values[k].to_string());
        csv.push_str(&format!("{},{},{},{}\n", seq.grid().radius(k), seq.gain[k], lv.field.values[k], v));
    }
    ctx.write("cross_section.csv", &csv)?;
    let dist = match &oracle {
        Some((name, f)) => Some(cross_validate(&seq.limit, f, name)?),
        None => None,
    };
    let gap = rep.gap_nodes > 0;
    let verdict = match &dist {
        None => "INCOMPLETE",
        Some(d) if d.sup > ctx.cfg.reproduce.oracle_tol || !seq.converged => "FAIL",
        Some(_) if !gap => "NO_GAP",
        Some(_) => "PASS",
    };
    ctx.write_json(
        "verdict.json",
        &json!({
            "verdict": verdict,
            "gap": rep,
            "margin": ctx.cfg.reproduce.margin,
            "oracle": dist,
            "oracle_tol": ctx.cfg.reproduce.oracle_tol,
            "converged": seq.converged,
        }),
    )?;
    println!("reproduce spiked-ball: {verdict} (max gap {:.4} at r = {:.4})", rep.max_gap, rep.max_gap_radius);
    match verdict {
        "INCOMPLETE" => Err(Fail { code: 3, msg: "radial oracle disabled; verdict incomplete".into() }),
        "FAIL" => Err(Fail { code: 1, msg: "envelope limit does not match the oracle".into() }),
        _ => Ok(()),
    }
}

fn cmd_paths(ctx: &Ctx) -> CliResult<()> {
    let n = ctx.cfg.paths.n_paths;
    if n == 0 {
        ctx.write_json("paths_report.json", &json!({ "probes": [] }))?;
        println!("paths: n_paths = 0, nothing to do");
        return Ok(());
    }
    let seq = Arc::new(ctx.sequence()?);
    let cfg = ctx.cfg.paths.path_config();
    let mut probes = Vec::new();
    for (i, x) in ctx.prep.probes.iter().enumerate() {
        let h = match build_branched_witness(&seq, 1, *x) {
            Ok(h) => h,
            Err(Error::NoWitness(msg)) => {
                probes.push(json!({ "probe": i, "x": x, "skipped": msg }));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        ctx.write_json(&format!("tree_{i}.json"), &dump_tree(&h, 8)?)?;
        for k in 0..ctx.cfg.paths.traces.min(n) {
            let rec = run_algorithm1_path(&h, *x, &cfg, k as u64)?;
            ctx.write(&format!("trace_{i}_{k}.csv"), &rec.to_csv())?;
        }
        let est = algorithm1_payoff(&h, *x, &ctx.prep.gain, n, &cfg)?;
        let value = h.value(x);
        let norm = h.error_bound();
        let holds = est.mean <= value + norm + 3.0 * est.std_error;
        probes.push(json!({
            "probe": i,
            "x": x,
            "depth": h.depth(),
            "value": value,
            "norm": norm,
            "payoff": est,
            "excessive": holds,
        }));
        println!("paths probe {i}: h = {value:.5}, payoff = {:.5} +- {:.5}, excessive = {holds}", est.mean, est.std_error);
    }
    ctx.write_json("paths_report.json", &json!({ "n_paths": n, "probes": probes }))
}

fn cmd_selftest() -> CliResult<()> {
    let mut ok = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        println!("selftest {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    // harmonic core: walk-on-spheres against the Poisson integral
    let data = BoundaryData::new(|p: &Point| p.x());
    let dom = bhm_core::geometry::DomainDescriptor::ball(Point::origin(2), 1.0)?;
    let x = Point::xy(0.3, 0.0);
    let exact = poisson_ball_eval(Point::origin(2), 1.0, &data, x);
    let est = wos_harmonic_eval(&dom, &data, x, &WosConfig { walks: 20_000, ..Default::default() })?;
    check(
        "wos-vs-poisson",
        (est.mean - exact).abs() <= 3.0 * est.std_error + 1e-3,
        format!("{:.4} vs {:.4}", est.mean, exact),
    );
    // envelope against the radial oracle on a small spiked run
    let cfg = RunConfig::from_json(
        r#"{"gain": {"kind": "spiked", "epsilon": 0.05, "mollify": 0.01}, "grid": {"kind": "radial", "nodes": 512}}"#,
    )?;
    let prep = cfg.prepare()?;
    let w1 = unbranched_envelope(&prep.gain, &prep.constants, prep.grid.clone(), &cfg.envelope.dictionary)?;
    let seq = iterate_envelopes(&prep.gain, w1, &cfg.envelope.iteration())?;
    let Grid::Radial(rg) = &*prep.grid else { unreachable!() };
    let v = radial_value_oracle(&prep.gain, rg)?.into_field(prep.grid.clone())?;
    let d = cross_validate(&seq.limit, &v, "radial")?;
    check("envelope-vs-oracle", seq.converged && d.sup < 1e-3, format!("sup {:.2e}", d.sup));
    let lv = &seq.levels[0];
    let bal = balayage_step(&lv.field, &lv.contact, 1)?;
    let rep = gap_report(&seq, &bal.values, 1e-3);
    check("spike-gap", rep.gap_nodes > 0, format!("max gap {:.4}", rep.max_gap));
    if ok {
        Ok(())
    } else {
        Err(Fail { code: 1, msg: "selftest failed".into() })
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Fail { code: 2, msg: format!("thread pool: {e}") })?;
    }
    match &cli.command {
        Command::Selftest => cmd_selftest(),
        Command::Envelope => cmd_envelope(&Ctx::load(cli)?),
        Command::Balayage => cmd_balayage(&Ctx::load(cli)?),
        Command::Paths => cmd_paths(&Ctx::load(cli)?),
        Command::Oracle => cmd_oracle(&Ctx::load(cli)?),
        Command::Reproduce { which: Reproduce::SpikedBall } => cmd_reproduce_spiked(&Ctx::load(cli)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("bhm: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
