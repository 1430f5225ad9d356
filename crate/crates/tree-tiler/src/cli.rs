//! The experiment harness: generate -> partition -> match -> assemble ->
//! verify, batch seeded runs with CSV records, plus the standalone
//! analysis subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::matching::{
    assemble_factor, perfect_matching, read_factor, verify_factor, write_factor, BipartitePair,
    Factor, MatchingResult,
};
use crate::partition::{
    run_pipeline, write_partition, Branch, PipelineConfig, PipelineOutcome,
    RoundReport,
};
use crate::prob::first_moment_g;
use crate::rrg::{check_gd_membership, generate_regular, read_graph, write_graph, RegularGraph};
use crate::tree::{read_tree, Tree};

pub const CSV_HEADER: &str =
    "seed,n,d,k,tree,branch,tau_r1,tau_r2,tau_r3,tau_r4,tau_r5,symdiff_max,retries,success,ms";

#[derive(Parser)]
#[command(name = "tree-tiler", version, about = "Tree factors in random regular graphs")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over a seed batch and emit CSV records.
    Tile(TileArgs),
    /// Generate a random regular graph file.
    Gen(GenArgs),
    /// Tabulate the star-factor first-moment function g(d) as CSV.
    Appendix(AppendixArgs),
    /// Time the pipeline stages over a ladder of sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigFlags {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Desk-scale mode: relaxed bounds and thresholds.
    #[arg(long)]
    practical: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// The upper window coefficient C.
    #[arg(long)]
    c_big: Option<f64>,
    /// High-degree threshold exponent beta.
    #[arg(long)]
    beta: Option<f64>,
    /// Fallback/override for the round-1 rate alpha.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    u_fraction: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    budget_factor: Option<u64>,
    /// Fail runs whose graph has two short cycles close together.
    #[arg(long)]
    enforce_gd: bool,
    /// Override the small-tree dispatch threshold.
    #[arg(long)]
    small_tree_k_max: Option<usize>,
}

impl ConfigFlags {
    fn build(&self) -> Result<PipelineConfig, String> {
        let mut cfg = match &self.config {
            None => PipelineConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| format!("bad config {}: {e}", path.display()))?
            }
        };
        if self.practical {
            cfg.practical_mode = true;
        }
        if let Some(x) = self.epsilon {
            cfg.epsilon = x;
        }
        if let Some(x) = self.delta {
            cfg.delta = x;
        }
        if let Some(x) = self.c_big {
            cfg.c_big = x;
        }
        if let Some(x) = self.beta {
            cfg.beta_exponent = x;
        }
        if let Some(x) = self.alpha {
            cfg.alpha_override = Some(x);
        }
        if let Some(x) = self.u_fraction {
            cfg.u_fraction = x;
        }
        if let Some(x) = self.retries {
            cfg.retries = x;
        }
        if let Some(x) = self.budget_factor {
            cfg.budget_factor = x;
        }
        if self.enforce_gd {
            cfg.enforce_gd = true;
        }
        if let Some(x) = self.small_tree_k_max {
            cfg.small_tree_k_max = Some(x);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TileArgs {
    /// Verify an existing triple of files instead of running: graph,
    /// tree, factor.
    #[arg(long, num_args = 3, value_names = ["GRAPH", "TREE", "FACTOR"])]
    verify_only: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Pattern tree: star:k, path:k, prufer:a,b,c or file:path.
    #[arg(long, default_value = "star:4")]
    tree: String,
    /// Seed batch: `7`, `1..10` (inclusive) or `1,4,9`.
    #[arg(long, default_value = "1")]
    seeds: String,
    /// Write per-seed artifacts (graph, tree, partition, factor,
    /// reports) under this directory.
    #[arg(long)]
    emit: Option<PathBuf>,
    /// Print one line per resampling step to stderr.
    #[arg(long)]
    trace: bool,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also run the short-cycle proximity diagnostic and report it.
    #[arg(long)]
    check_gd: bool,
}

#[derive(Args)]
struct AppendixArgs {
    #[arg(long, default_value_t = 5)]
    from: u64,
    #[arg(long, default_value_t = 20)]
    to: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated ladder of vertex counts.
    #[arg(long, default_value = "1000,2000,4000")]
    n: String,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value = "path:4")]
    tree: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    config: ConfigFlags,
}

/// One row of the tile CSV.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub tree: String,
    pub branch: String,
    /// Resampling steps per round; the small branch reports its single
    /// round as tau_r1.
    pub tau: [u64; 5],
    pub symdiff_max: f64,
    pub retries: u32,
    pub success: bool,
    pub ms: u128,
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.6},{},{},{}",
            self.seed,
            self.n,
            self.d,
            self.k,
            self.tree,
            self.branch,
            self.tau[0],
            self.tau[1],
            self.tau[2],
            self.tau[3],
            self.tau[4],
            self.symdiff_max,
            self.retries,
            self.success,
            self.ms
        )
    }
}

/// Parses the tree mini-grammar: star:k, path:k, prufer:a,b,c, file:path.
pub fn parse_tree_spec(spec: &str) -> Result<Tree, String> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| format!("tree spec {spec:?} needs kind:args"))?;
    match kind {
        "star" => {
            let k: usize = rest.parse().map_err(|_| format!("bad star size {rest:?}"))?;
            Tree::star(k).map_err(|e| e.to_string())
        }
        "path" => {
            let k: usize = rest.parse().map_err(|_| format!("bad path size {rest:?}"))?;
            Tree::path(k).map_err(|e| e.to_string())
        }
        "prufer" => {
            let seq: Result<Vec<usize>, _> = rest.split(',').map(|t| t.trim().parse()).collect();
            let seq = seq.map_err(|_| format!("bad prufer sequence {rest:?}"))?;
            Tree::from_prufer(&seq).map_err(|e| e.to_string())
        }
        "file" => read_tree(Path::new(rest)).map_err(|e| e.to_string()),
        other => Err(format!("unknown tree kind {other:?}")),
    }
}

/// Parses `7`, `1..10` (inclusive) or `1,4,9`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(|_| format!("bad seed {a:?}"))?;
        let hi: u64 = b.trim().parse().map_err(|_| format!("bad seed {b:?}"))?;
        if hi < lo {
            return Err(format!("empty seed range {spec:?}"));
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad seed {t:?}")))
        .collect()
}

fn tau_by_round(reports: &[RoundReport]) -> [u64; 5] {
    let mut tau = [0u64; 5];
    for r in reports {
        match r.round.as_str() {
            "r1" | "small" => tau[0] += r.tau,
            "r2" => tau[1] += r.tau,
            "r3" => tau[2] += r.tau,
            "r4" => tau[3] += r.tau,
            "r5" => tau[4] += r.tau,
            _ => {}
        }
    }
    tau
}

/// Full product of one seed: partition, matchings along tree edges,
/// factor assembly, verification.
pub struct SeedArtifacts {
    pub graph: RegularGraph,
    pub outcome: PipelineOutcome,
    pub factor: Factor,
}

/// Runs one seed end to end. The seed drives both the graph and the
/// pipeline, so a record is a pure function of (seed, n, d, tree, cfg).
pub fn run_seed(
    n: usize,
    d: usize,
    tree: &Tree,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<SeedArtifacts, String> {
    let graph = generate_regular(n, d, seed).map_err(|e| e.to_string())?;
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let outcome = run_pipeline(&graph, tree, &cfg).map_err(|e| e.to_string())?;

    let mut matchings = BTreeMap::new();
    for &(i, j) in tree.edges() {
        let pair = BipartitePair::from_parts(&graph, &outcome.parts, i, j);
        let result = perfect_matching(&pair);
        if let MatchingResult::Violator(w) = &result {
            return Err(format!(
                "no perfect matching between parts {i} and {j}: Hall violator of size {}",
                w.len()
            ));
        }
        matchings.insert((i, j), result);
    }
    let factor =
        assemble_factor(&graph, tree, &outcome.parts, &matchings).map_err(|e| e.to_string())?;
    verify_factor(&graph, tree, &factor).map_err(|e| e.to_string())?;
    Ok(SeedArtifacts {
        graph,
        outcome,
        factor,
    })
}

fn emit_artifacts(
    dir: &Path,
    seed: u64,
    tree: &Tree,
    art: &SeedArtifacts,
) -> Result<(), String> {
    let sub = dir.join(format!("seed{seed}"));
    std::fs::create_dir_all(&sub).map_err(|e| e.to_string())?;
    write_graph(&sub.join("graph.txt"), &art.graph).map_err(|e| e.to_string())?;
    crate::tree::write_tree(&sub.join("tree.txt"), tree).map_err(|e| e.to_string())?;
    write_partition(&sub.join("partition.txt"), &art.outcome.parts).map_err(|e| e.to_string())?;
    write_factor(&sub.join("factor.txt"), &art.factor).map_err(|e| e.to_string())?;
    let reports = serde_json::to_string_pretty(&art.outcome.reports).map_err(|e| e.to_string())?;
    std::fs::write(sub.join("reports.json"), reports).map_err(|e| e.to_string())?;
    Ok(())
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("TREE_TILER_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|p| p.get())
                .unwrap_or(1)
        });
    cap.min(jobs).max(1)
}

fn cmd_tile(args: &TileArgs) -> ExitCode {
    if let Some(files) = &args.verify_only {
        return cmd_verify_only(&files[0], &files[1], &files[2]);
    }
    let cfg = match args.config.build() {
        Ok(c) => c,
        Err(e) => return usage(&e),
    };
    let tree = match parse_tree_spec(&args.tree) {
        Ok(t) => t,
        Err(e) => return usage(&e),
    };
    let seeds = match parse_seeds(&args.seeds) {
        Ok(s) => s,
        Err(e) => return usage(&e),
    };
    if args.n % tree.k() != 0 {
        return usage(&format!(
            "tree size {} does not divide n = {}",
            tree.k(),
            args.n
        ));
    }
    if args.n * args.d % 2 != 0 || args.d >= args.n || args.d == 0 {
        return usage(&format!("infeasible graph parameters n = {}, d = {}", args.n, args.d));
    }

    let results: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; seeds.len()]);
    let next = AtomicUsize::new(0);
    let workers = worker_count(seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= seeds.len() {
                    break;
                }
                let seed = seeds[idx];
                let started = Instant::now();
                let run = run_seed(args.n, args.d, &tree, &cfg, seed);
                let ms = started.elapsed().as_millis();
                let record = match &run {
                    Ok(art) => RunRecord {
                        seed,
                        n: args.n,
                        d: args.d,
                        k: tree.k(),
                        tree: args.tree.clone(),
                        branch: art.outcome.branch.to_string(),
                        tau: tau_by_round(&art.outcome.reports),
                        symdiff_max: art.outcome.sym_diff_ratio_max(args.n),
                        retries: art.outcome.attempts - 1,
                        success: true,
                        ms,
                    },
                    Err(e) => {
                        log::warn!("seed {seed}: {e}");
                        RunRecord {
                            seed,
                            n: args.n,
                            d: args.d,
                            k: tree.k(),
                            tree: args.tree.clone(),
                            branch: match tree.k()
                                <= crate::partition::small_tree_threshold(&cfg, args.d)
                            {
                                true => Branch::Small.to_string(),
                                false => Branch::Large.to_string(),
                            },
                            tau: [0; 5],
                            symdiff_max: 0.0,
                            retries: cfg.retries,
                            success: false,
                            ms,
                        }
                    }
                };
                if args.trace {
                    if let Ok(art) = &run {
                        for (round, log) in &art.outcome.logs {
                            for (i, step) in log.steps.iter().enumerate() {
                                eprintln!("{round} {} {} {}", i + 1, step.event, step.vars.len());
                            }
                        }
                    }
                }
                if let (Some(dir), Ok(art)) = (&args.emit, &run) {
                    if let Err(e) = emit_artifacts(dir, seed, &tree, art) {
                        log::error!("seed {seed}: emit failed: {e}");
                    }
                }
                results.lock().unwrap()[idx] = Some(record);
            });
        }
    });

    println!("{CSV_HEADER}");
    let records = results.into_inner().unwrap();
    let mut all_ok = true;
    for record in records.into_iter().flatten() {
        all_ok &= record.success;
        println!("{}", record.csv_row());
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_verify_only(graph: &Path, tree: &Path, factor: &Path) -> ExitCode {
    let g = match read_graph(graph) {
        Ok(g) => g,
        Err(e) => return usage(&e.to_string()),
    };
    let t = match read_tree(tree) {
        Ok(t) => t,
        Err(e) => return usage(&e.to_string()),
    };
    let f = match read_factor(factor) {
        Ok(f) => f,
        Err(e) => return usage(&e.to_string()),
    };
    match verify_factor(&g, &t, &f) {
        Ok(()) => {
            println!("valid: {} disjoint copies covering {} vertices", f.copies.len(), g.n());
            ExitCode::SUCCESS
        }
        Err(v) => {
            println!("invalid: {v}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_gen(args: &GenArgs) -> ExitCode {
    let g = match generate_regular(args.n, args.d, args.seed) {
        Ok(g) => g,
        Err(e) => return usage(&e.to_string()),
    };
    if let Err(e) = write_graph(&args.out, &g) {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    if args.check_gd {
        let report = check_gd_membership(&g);
        match report.witness {
            None => println!("gd-member: true"),
            Some(w) => println!(
                "gd-member: false (cycles of length {} and {} at distance {})",
                w.cycle_a.len(),
                w.cycle_b.len(),
                w.distance
            ),
        }
    }
    ExitCode::SUCCESS
}

fn cmd_appendix(args: &AppendixArgs) -> ExitCode {
    if args.from < 3 || args.to < args.from {
        return usage("appendix needs 3 <= from <= to");
    }
    let mut out = String::from("d,g\n");
    for d in args.from..=args.to {
        out.push_str(&format!("{d},{:.12}\n", first_moment_g(d)));
    }
    match &args.out {
        None => print!("{out}"),
        Some(path) => {
            if let Err(e) = std::fs::write(path, out) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        }
    }
    ExitCode::SUCCESS
}

fn cmd_bench(args: &BenchArgs) -> ExitCode {
    let cfg = match args.config.build() {
        Ok(mut c) => {
            c.practical_mode = true;
            c
        }
        Err(e) => return usage(&e),
    };
    let tree = match parse_tree_spec(&args.tree) {
        Ok(t) => t,
        Err(e) => return usage(&e),
    };
    let sizes: Result<Vec<usize>, _> = args.n.split(',').map(|t| t.trim().parse()).collect();
    let sizes = match sizes {
        Ok(s) => s,
        Err(_) => return usage(&format!("bad size ladder {:?}", args.n)),
    };
    println!("n,stage,ms");
    for n in sizes {
        if n % tree.k() != 0 || n * args.d % 2 != 0 || args.d >= n {
            return usage(&format!("infeasible bench point n = {n}"));
        }
        let t0 = Instant::now();
        let g = match generate_regular(n, args.d, args.seed) {
            Ok(g) => g,
            Err(e) => return usage(&e.to_string()),
        };
        println!("{n},generate,{}", t0.elapsed().as_millis());

        let mut cfg = cfg.clone();
        cfg.seed = args.seed;
        let t1 = Instant::now();
        let outcome = match run_pipeline(&g, &tree, &cfg) {
            Ok(o) => o,
            Err(e) => {
                eprintln!("error: partition failed at n = {n}: {e}");
                return ExitCode::FAILURE;
            }
        };
        println!("{n},partition,{}", t1.elapsed().as_millis());

        let t2 = Instant::now();
        let mut matchings = BTreeMap::new();
        for &(i, j) in tree.edges() {
            let pair = BipartitePair::from_parts(&g, &outcome.parts, i, j);
            match perfect_matching(&pair) {
                MatchingResult::Perfect(_) => {
                    matchings.insert((i, j), perfect_matching(&pair));
                }
                MatchingResult::Violator(_) => {
                    eprintln!("error: matching failed at n = {n} on edge ({i}, {j})");
                    return ExitCode::FAILURE;
                }
            }
        }
        println!("{n},matching,{}", t2.elapsed().as_millis());

        let t3 = Instant::now();
        let factor = match assemble_factor(&g, &tree, &outcome.parts, &matchings) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: assembly failed at n = {n}: {e}");
                return ExitCode::FAILURE;
            }
        };
        if let Err(e) = verify_factor(&g, &tree, &factor) {
            eprintln!("error: verification failed at n = {n}: {e}");
            return ExitCode::FAILURE;
        }
        println!("{n},assemble_verify,{}", t3.elapsed().as_millis());
    }
    ExitCode::SUCCESS
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("usage error: {msg}");
    ExitCode::from(2)
}

pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Tile(args) => cmd_tile(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Appendix(args) => cmd_appendix(args),
        Command::Bench(args) => cmd_bench(args),
    }
}
