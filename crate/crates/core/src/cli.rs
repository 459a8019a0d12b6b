// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error or invalid
//! argument value, 3 IO, schema or data error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::adaseka::{
    adaseka_plan, dynamic_projection, learn_expert, route_coefficients, Expert, ExpertBank,
    ExpertEntry,
};
use crate::data::{
    expand_triplets, generate_synthetic, load_bank, load_expert_bank, load_expert_dataset,
    load_model_config, load_samples, load_selection, parse_highlights, resolve_span_positions,
    save_bank, save_expert_bank, save_samples, save_selection, split_prompts, PromptTriplet,
};
use crate::error::{invalid, Result, SekaError};
use crate::linalg::{svd, Matrix};
use crate::metrics::{attention_mass, export_heatmap, export_pca_shift};
use crate::model::{tokenize, ToyModel, TokenSequence};
use crate::spectral::{select_rank, Side, SteeringGains};
use crate::steering::{
    learn_bank, make_edit_plan, verify_bias_equivalence, HeadSelection, ProjectionBank,
};

#[derive(Parser, Debug)]
#[command(name = "seka", version, about = "Spectral key-embedding attention steering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate template contrastive samples.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a projection bank from a samples file.
    LearnBank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        /// Variance threshold in (0, 1].
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select heads whose distance reaches a threshold.
    SelectHeads {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        delta_min: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Steer prompts with `**` highlights and report attention mass.
    ///
    /// The edit is k + (g_pos P+ k + g_neg P- k) / 2, so the effective
    /// positive gain is g_pos / 2.
    Steer {
        #[command(flatten)]
        seka: SekaArgs,
        #[arg(long)]
        prompt_file: PathBuf,
        /// Next-token candidates to print.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Learn one expert and add it to an expert bank (created if absent).
    LearnExpert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Expert name; defaults to the dataset's name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long = "K")]
        k: usize,
        /// Expert-bank file to update.
        #[arg(long)]
        bank: PathBuf,
    },
    /// Query-adaptive steering: print routing coefficients and mass.
    Route {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        expert_bank: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        g: f64,
        #[arg(long)]
        prompt_file: PathBuf,
    },
    /// Run invariant suites against a model and bank.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Expert bank for the routing suite; derived from the bank if absent.
        #[arg(long)]
        expert_bank: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the head-distance heatmap as CSV.
    ExportHeatmap {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write positive/negative span keys of one head in a joint PCA plane.
    ExportPca {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        kv_head: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time steered against unsteered forward passes.
    Bench {
        #[command(flatten)]
        seka: SekaArgs,
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
    },
}

#[derive(Args, Debug)]
struct SekaArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    selection: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    g_pos: f64,
    #[arg(long, allow_negative_numbers = true)]
    g_neg: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Suite {
    Spectral,
    Equivalence,
    Routing,
    All,
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Ok,
    VerifyFailed,
}

/// Runs the command line `argv` (program name first) and returns the
/// process exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = std::env::var("SEKA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::VerifyFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &SekaError) -> i32 {
    match e {
        SekaError::InvalidInput(_) | SekaError::Capacity(_) => 2,
        _ => 3,
    }
}

fn load_model(path: &Path) -> Result<ToyModel> {
    ToyModel::new(load_model_config(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| SekaError::io(path, e))
}

fn check_bank(model: &ToyModel, fingerprint: u64, what: &str) -> Result<()> {
    if model.fingerprint() != fingerprint {
        return Err(SekaError::InvalidPlan(format!(
            "{what} fingerprint {fingerprint:016x} does not match model {:016x}",
            model.fingerprint()
        )));
    }
    Ok(())
}

fn triplets_of(path: &Path) -> Result<Vec<PromptTriplet>> {
    let mut out = Vec::new();
    for s in load_samples(path)? {
        out.extend(expand_triplets(&s)?);
    }
    Ok(out)
}

/// Highlighted prompts from a file, tokenized.
fn highlighted_prompts(path: &Path) -> Result<Vec<(String, TokenSequence, BTreeSet<usize>)>> {
    let blocks = split_prompts(&read_text(path)?);
    if blocks.is_empty() {
        return Err(invalid(format!("{} contains no prompts", path.display())));
    }
    blocks
        .iter()
        .map(|b| {
            let h = parse_highlights(b)?;
            let seq = h.tokens()?;
            Ok((h.clean_text, seq, h.highlight_spans))
        })
        .collect()
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::GenData { n, seed, out } => {
            let samples = generate_synthetic(n, seed)?;
            save_samples(&samples, &out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::LearnBank {
            model,
            samples,
            gamma,
            out,
        } => {
            let model = load_model(&model)?;
            let triplets = triplets_of(&samples)?;
            let bank = learn_bank(&model, &triplets, gamma)?;
            save_bank(&bank, &out)?;
            println!(
                "learned {} heads from {} triplets; wrote {}",
                bank.entries.len(),
                triplets.len(),
                out.display()
            );
        }
        Command::SelectHeads {
            bank,
            delta_min,
            out,
        } => {
            if !delta_min.is_finite() {
                return Err(invalid("delta-min must be finite"));
            }
            let sel = load_bank(&bank)?.select_heads(delta_min);
            save_selection(&sel, &out)?;
            println!("selected {} heads at delta_min {delta_min}", sel.selected.len());
            for (l, h) in &sel.selected {
                println!("  layer {l} kv-head {h}");
            }
        }
        Command::Steer {
            seka,
            prompt_file,
            top,
        } => steer(&seka, &prompt_file, top)?,
        Command::LearnExpert {
            model,
            dataset,
            name,
            k,
            bank,
        } => {
            let model = load_model(&model)?;
            let mut ds = load_expert_dataset(&dataset)?;
            if let Some(n) = name {
                ds.name = n;
            }
            let expert = learn_expert(&model, &ds, k)?;
            let mut eb = if bank.exists() {
                let eb = load_expert_bank(&bank)?;
                check_bank(&model, eb.fingerprint, "expert bank")?;
                if eb.k != k {
                    return Err(invalid(format!("expert bank has K = {}, got --K {k}", eb.k)));
                }
                eb
            } else {
                ExpertBank::new(k, model.fingerprint(), vec![expert.clone()])?
            };
            eb.upsert(expert)?;
            save_expert_bank(&eb, &bank)?;
            println!(
                "expert {:?} stored; bank {} now holds {} expert(s)",
                ds.name,
                bank.display(),
                eb.experts.len()
            );
        }
        Command::Route {
            model,
            expert_bank,
            selection,
            g,
            prompt_file,
        } => {
            let model = load_model(&model)?;
            let eb = load_expert_bank(&expert_bank)?;
            let sel = load_selection(&selection)?;
            check_bank(&model, eb.fingerprint, "expert bank")?;
            for (i, (text, seq, mask)) in highlighted_prompts(&prompt_file)?.into_iter().enumerate() {
                println!("prompt {i}: {text:?}");
                let (plan, alpha) = if mask.is_empty() {
                    (None, route_coefficients(&model.capture_last_query(&seq)?, &eb)?)
                } else {
                    let (plan, alpha) = adaseka_plan(&model, &seq, &eb, &sel, g, mask.clone())?;
                    (Some(plan), alpha)
                };
                for &(l, h) in &sel.selected {
                    let parts: Vec<String> = eb
                        .experts
                        .iter()
                        .zip(alpha.cell(l, h))
                        .map(|(x, a)| format!("{}={a:+.6}", x.name))
                        .collect();
                    println!("  layer {l} kv-head {h}: {}", parts.join(" "));
                }
                let Some(plan) = plan else {
                    println!("  no highlighted tokens; mass skipped");
                    continue;
                };
                let base = attention_mass(&model, &seq, &mask, None)?;
                let steered = attention_mass(&model, &seq, &mask, Some(&plan))?;
                println!("  mass baseline {:.6} steered {:.6}", base.mean, steered.mean);
            }
        }
        Command::Verify {
            model,
            bank,
            suite,
            expert_bank,
            seed,
        } => {
            let model = load_model(&model)?;
            let bank = load_bank(&bank)?;
            check_bank(&model, bank.fingerprint, "bank")?;
            let experts = match expert_bank {
                Some(p) => {
                    let eb = load_expert_bank(&p)?;
                    check_bank(&model, eb.fingerprint, "expert bank")?;
                    eb
                }
                None => derived_experts(&bank)?,
            };
            let mut failures = Vec::new();
            if matches!(suite, Suite::Spectral | Suite::All) {
                failures.extend(verify_spectral(&bank, seed)?);
            }
            if matches!(suite, Suite::Equivalence | Suite::All) {
                failures.extend(verify_equivalence(&model, &bank, seed)?);
            }
            if matches!(suite, Suite::Routing | Suite::All) {
                failures.extend(verify_routing(&model, &experts, seed)?);
            }
            for f in &failures {
                println!("FAIL {f}");
            }
            if !failures.is_empty() {
                return Ok(Outcome::VerifyFailed);
            }
            println!("all invariants hold");
        }
        Command::ExportHeatmap { bank, out } => {
            export_heatmap(&load_bank(&bank)?.head_distances(), &out)?;
            println!("wrote {}", out.display());
        }
        Command::ExportPca {
            model,
            samples,
            layer,
            kv_head,
            out,
        } => {
            let model = load_model(&model)?;
            let cfg = model.config();
            if layer >= cfg.n_layers || kv_head >= cfg.n_kv_heads {
                return Err(invalid(format!("head (layer {layer}, kv-head {kv_head}) is outside the model")));
            }
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            let mut rows = 0;
            for (i, t) in triplets_of(&samples)?.iter().enumerate() {
                let spans = std::slice::from_ref(&t.span_text);
                let cp = span_keys(&model, &t.positive_prompt, spans, i, layer, kv_head)?;
                let cn = span_keys(&model, &t.negative_prompt, spans, i, layer, kv_head)?;
                if cp.rows() != cn.rows() {
                    return Err(SekaError::SpanResolution {
                        index: i,
                        reason: "span covers different token counts across variants".into(),
                    });
                }
                rows += cp.rows();
                pos.extend_from_slice(cp.data());
                neg.extend_from_slice(cn.data());
            }
            let pos = Matrix::new(rows, cfg.d_k, pos)?;
            let neg = Matrix::new(rows, cfg.d_k, neg)?;
            let shift = export_pca_shift(&pos, &neg, &out)?;
            println!(
                "wrote {} pairs to {}; mean shift ({:.6}, {:.6})",
                rows,
                out.display(),
                shift.mean_shift[0],
                shift.mean_shift[1]
            );
        }
        Command::Bench {
            seka,
            prompt_file,
            repeat,
        } => bench(&seka, &prompt_file, repeat)?,
    }
    Ok(Outcome::Ok)
}

fn span_keys(
    model: &ToyModel,
    prompt: &str,
    spans: &[String],
    index: usize,
    layer: usize,
    kv_head: usize,
) -> Result<Matrix> {
    let seq = tokenize(prompt)?;
    let positions = resolve_span_positions(prompt, &seq, spans, index)?;
    Ok(model.capture_keys(&seq, &positions)?.cell(layer, kv_head).clone())
}

struct SekaSetup {
    model: ToyModel,
    bank: ProjectionBank,
    selection: HeadSelection,
    gains: SteeringGains,
}

fn seka_setup(args: &SekaArgs) -> Result<SekaSetup> {
    let model = load_model(&args.model)?;
    let bank = load_bank(&args.bank)?;
    check_bank(&model, bank.fingerprint, "bank")?;
    Ok(SekaSetup {
        model,
        bank,
        selection: load_selection(&args.selection)?,
        gains: SteeringGains::new(args.g_pos, args.g_neg)?,
    })
}

fn steer(args: &SekaArgs, prompt_file: &Path, top: usize) -> Result<()> {
    let s = seka_setup(args)?;
    for (i, (text, seq, mask)) in highlighted_prompts(prompt_file)?.into_iter().enumerate() {
        println!("prompt {i}: {text:?}");
        if mask.is_empty() {
            println!("  no highlighted tokens; skipped");
            continue;
        }
        let plan = make_edit_plan(&s.bank, &s.selection, s.gains, mask.clone())?;
        let base = attention_mass(&s.model, &seq, &mask, None)?;
        let steered = attention_mass(&s.model, &seq, &mask, Some(&plan))?;
        println!("  mass baseline {:.6} steered {:.6}", base.mean, steered.mean);
        let cfg = s.model.config();
        for l in 0..cfg.n_layers {
            let row: Vec<String> = (0..cfg.n_query_heads)
                .map(|h| {
                    let k = l * cfg.n_query_heads + h;
                    format!("{:.4}->{:.4}", base.per_head[k], steered.per_head[k])
                })
                .collect();
            println!("  layer {l}: {}", row.join(" "));
        }
        let scores = s
            .model
            .forward(&seq, Some(&plan), Default::default())?
            .next_token_scores;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &id in order.iter().take(top) {
            let known = seq
                .ids
                .iter()
                .position(|&x| x as usize == id)
                .map(|p| seq.texts[p].as_str())
                .unwrap_or("?");
            println!("  next id {id:5} ({known}) score {:.6}", scores[id]);
        }
    }
    Ok(())
}

fn bench(args: &SekaArgs, prompt_file: &Path, repeat: usize) -> Result<()> {
    if repeat == 0 {
        return Err(invalid("--repeat must be >= 1"));
    }
    let s = seka_setup(args)?;
    let prompts = highlighted_prompts(prompt_file)?;
    let mut plans = Vec::new();
    for (_, _, mask) in &prompts {
        plans.push(if mask.is_empty() {
            None
        } else {
            Some(make_edit_plan(&s.bank, &s.selection, s.gains, mask.clone())?)
        });
    }
    let time = |steered: bool| -> Result<f64> {
        let start = Instant::now();
        for _ in 0..repeat {
            for ((_, seq, _), plan) in prompts.iter().zip(&plans) {
                let p = if steered { plan.as_ref() } else { None };
                s.model.forward(seq, p, Default::default())?;
            }
        }
        Ok(start.elapsed().as_secs_f64())
    };
    // builds the embedding table outside the timed region
    s.model.forward(&prompts[0].1, None, Default::default())?;
    let base = time(false)?;
    let steered = time(true)?;
    let n = (repeat * prompts.len()) as f64;
    println!("unsteered {:.3} ms/pass", 1e3 * base / n);
    println!("steered   {:.3} ms/pass", 1e3 * steered / n);
    println!("overhead  {:+.1}%", 100.0 * (steered - base) / base);
    Ok(())
}

/// Two experts from the bank itself: leading positive and leading
/// negative-side components at each head.
fn derived_experts(bank: &ProjectionBank) -> Result<ExpertBank> {
    let k = bank.entries.iter().map(|e| e.k_pos).max().unwrap_or(1);
    let make = |name: &str, neg: bool| Expert {
        name: name.into(),
        entries: bank
            .entries
            .iter()
            .map(|e| {
                let (u, s) = if neg { (&e.u_neg, &e.s_neg) } else { (&e.u_pos, &e.s_pos) };
                ExpertEntry {
                    layer: e.layer,
                    kv_head: e.kv_head,
                    u: u.columns(0..e.k_pos),
                    s: s[..e.k_pos].to_vec(),
                }
            })
            .collect(),
    };
    ExpertBank::new(k, bank.fingerprint, vec![make("positive", false), make("negative", true)])
}

fn random_matrix(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn orthonormality_error(u: &Matrix) -> Result<f64> {
    Ok(u.transpose().matmul(u)?.sub(&Matrix::identity(u.cols()))?.frobenius_norm())
}

fn verify_spectral(bank: &ProjectionBank, seed: u64) -> Result<Vec<String>> {
    let mut fails = Vec::new();
    let d = bank.d_k();
    for e in &bank.entries {
        let at = format!("(layer {}, kv-head {})", e.layer, e.kv_head);
        for (name, u) in [("U_pos", &e.u_pos), ("U_neg", &e.u_neg)] {
            let err = orthonormality_error(u)?;
            if err > 1e-10 {
                fails.push(format!("orthonormality of {name} {at}: {err:.3e}"));
            }
        }
        for (side, s, k) in [(Side::Positive, &e.s_pos, e.k_pos), (Side::Negative, &e.s_neg, e.k_neg)] {
            if select_rank(s, bank.gamma, side)? != k {
                fails.push(format!("rank minimality {side:?} {at}: stored k = {k}"));
            }
        }
        let pair = e.projections(bank.gamma);
        let checks = [
            ("P+", &pair.p_pos, e.k_pos as f64),
            ("P-", &pair.p_neg, (d - e.k_neg) as f64),
        ];
        for (name, p, rank) in checks {
            let idem = p.matmul(p)?.sub(p)?.frobenius_norm();
            let sym = p.sub(&p.transpose())?.frobenius_norm();
            if idem > 1e-9 {
                fails.push(format!("idempotency of {name} {at}: {idem:.3e}"));
            }
            if sym > 1e-10 {
                fails.push(format!("symmetry of {name} {at}: {sym:.3e}"));
            }
            if (p.trace() - rank).abs() > 1e-8 {
                fails.push(format!("trace of {name} {at}: {} vs {rank}", p.trace()));
            }
        }
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for case in 0..50 {
        let (m, n) = (rng.gen_range(1..=d), rng.gen_range(1..=d));
        let a = random_matrix(&mut rng, m, n);
        let r = svd(&a)?;
        let rec = r.reconstruct().sub(&a)?.frobenius_norm();
        if rec > 1e-8 * a.frobenius_norm().max(1.0) {
            fails.push(format!("svd reconstruction, case {case} ({m}x{n}): {rec:.3e}"));
        }
        for (name, u) in [("U", &r.u), ("V", &r.v)] {
            let err = orthonormality_error(u)?;
            if err > 1e-10 {
                fails.push(format!("svd orthonormality of {name}, case {case}: {err:.3e}"));
            }
        }
    }
    Ok(fails)
}

/// Seeded random-token prompt of `len` words.
fn random_prompt(rng: &mut Xoshiro256PlusPlus, len: usize) -> Result<TokenSequence> {
    let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..5000))).collect();
    tokenize(&words.join(" "))
}

fn random_mask(rng: &mut Xoshiro256PlusPlus, len: usize) -> BTreeSet<usize> {
    let mut mask = BTreeSet::new();
    let start = rng.gen_range(0..len);
    let width = rng.gen_range(1..=4.min(len - start));
    mask.extend(start..start + width);
    mask
}

fn verify_equivalence(model: &ToyModel, bank: &ProjectionBank, seed: u64) -> Result<Vec<String>> {
    let mut fails = Vec::new();
    let all = bank.select_heads(f64::NEG_INFINITY);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed);
    let len = model.config().max_seq.min(32);
    for case in 0..10 {
        let seq = random_prompt(&mut rng, len)?;
        let mask = random_mask(&mut rng, seq.len());
        let gains = SteeringGains::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))?;
        let plan = make_edit_plan(bank, &all, gains, mask.clone())?;
        let diff = verify_bias_equivalence(model, &seq, &plan)?;
        if diff > 1e-8 {
            fails.push(format!("bias equivalence, prompt {case}: max |A' - (A + B)| = {diff:.3e}"));
        }
        let zero = make_edit_plan(bank, &all, SteeringGains::new(0.0, 0.0)?, mask)?;
        let a = model.forward(&seq, None, Default::default())?;
        let b = model.forward(&seq, Some(&zero), Default::default())?;
        if a != b {
            fails.push(format!("zero-gain identity, prompt {case}: scores differ"));
        }
    }
    Ok(fails)
}

fn verify_routing(model: &ToyModel, experts: &ExpertBank, seed: u64) -> Result<Vec<String>> {
    let mut fails = Vec::new();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0xa1fa);
    let len = model.config().max_seq.min(24);
    for case in 0..10 {
        let seq = random_prompt(&mut rng, len)?;
        let queries = model.capture_last_query(&seq)?;
        let alpha = route_coefficients(&queries, experts)?;
        let m = experts.experts.len();
        for l in 0..experts.n_layers {
            for h in 0..experts.n_kv_heads {
                let at = format!("prompt {case} (layer {l}, kv-head {h})");
                let c = (l * experts.n_kv_heads + h) * m;
                let a = &alpha.alpha[c..c + m];
                let raw = &alpha.raw[c..c + m];
                let max = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                if (max - 1.0).abs() > 1e-12 && max.abs() > 1e-12 {
                    fails.push(format!("routing normalization {at}: max |alpha| = {max}"));
                }
                if max != 0.0 && a.iter().zip(raw).any(|(x, r)| x.signum() != r.signum() && *r != 0.0) {
                    fails.push(format!("routing sign preservation {at}"));
                }
                let p = dynamic_projection(&alpha, experts, l, h)?;
                let asym = p.sub(&p.transpose())?.frobenius_norm();
                if asym > 1e-10 {
                    fails.push(format!("dynamic projection symmetry {at}: {asym:.3e}"));
                }
            }
        }
    }
    Ok(fails)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(dispatch(&argv("seka frobnicate")), 2);
        assert_eq!(dispatch(&argv("seka")), 2);
    }

    #[test]
    fn missing_file_is_io_error() {
        let code = dispatch(&argv("seka export-heatmap --bank /nonexistent/b.json --out /tmp/x.csv"));
        assert_eq!(code, 3);
    }
}
