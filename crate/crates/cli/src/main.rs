mod endpoint;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use submark::attacks::{attack_merge, AttackConfig, AttackKind};
use submark::ecc::Scheme;
use submark::key::encode_floats;
use submark::pipeline::{
    build_base, build_world, derivative_pool, eval_lineage, finalize_key, held_out, independent_pool, inject_draft, keygen,
    run_attack, verify_black_key, verify_white_key, watermark, SEED_ENV,
};
use submark::substrate::checkpoint::write_atomic;
use submark::substrate::{load_checkpoint, model_hash, save_checkpoint};
use submark::verify_black::{LogitQuery, Loopback};
use submark::{corpus, FactWorld, KeyDraft, ModelState, PipelineConfig, StageExt, WatermarkKey};

use crate::endpoint::Endpoint;

const EXIT_NOT_OWNED: u8 = 2;
const EXIT_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "submark", version, about = "Multi-bit watermarking of small decoder language models")]
struct Cli {
    /// Master seed; overrides the `seed` field of any config.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Error-correcting code applied to the payload.
    #[arg(long)]
    ecc: Option<Scheme>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default config document.
    DefaultConfig,
    /// Generate the fact world and pretrain a base model on it.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Draw payload, anchors, reference facts and bit vectors for a base model.
    Keygen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        /// Draft key file (secret).
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a draft's payload into the base model.
    Inject {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        draft: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Must match the draft's scheme when given.
        #[arg(long)]
        ecc: Option<Scheme>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Record sentinels, signatures and reference logits and write the final key.
    Signatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        draft: PathBuf,
        #[arg(long)]
        key: PathBuf,
    },
    /// Pretrain, inject and write checkpoint, report and key in one go.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Key file; must live outside the output directory.
        #[arg(long)]
        key: PathBuf,
    },
    /// Recover the payload and decide ownership.
    Verify(VerifyArgs),
    /// Answer sentinel-logit queries for a checkpoint over stdin and stdout.
    Serve {
        #[arg(long)]
        model: PathBuf,
    },
    /// Apply a model-modification attack.
    Attack(AttackArgs),
    /// Score a pool of derivatives and independent models against the key.
    EvalLineage {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        independents: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a key's internal consistency and, optionally, that it matches a checkpoint.
    ValidateKey {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    White,
    Black,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Checkpoint of the suspect model.
    #[arg(long, required_unless_present = "endpoint")]
    model: Option<PathBuf>,
    /// Black mode only: command serving the query protocol, split on whitespace.
    #[arg(long, conflicts_with = "model")]
    endpoint: Option<String>,
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    no_reanchor: bool,
    /// Must match the key's scheme when given.
    #[arg(long)]
    ecc: Option<Scheme>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    kind: AttackKind,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config whose world supplies the attack facts.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    world: Option<PathBuf>,
    /// Merge partner; defaults to a fine-tuned copy of the model.
    #[arg(long)]
    partner: Option<PathBuf>,
    /// Layers the attacker may modify, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Let the attacker modify every parameter.
    #[arg(long, conflicts_with = "layers")]
    all_layers: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_FAILURE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let seed = cli.seed;
    match cli.command {
        Cmd::DefaultConfig => {
            println!("{}", PipelineConfig::default().to_json());
            Ok(0)
        }
        Cmd::Pretrain { cfg, out_dir } => cmd_pretrain(&load_config(&cfg, seed)?, &out_dir),
        Cmd::Keygen { cfg, base, world, out } => {
            let cfg = load_config(&cfg, seed)?;
            let model = load_model(&base)?;
            let world = load_world(world.as_deref(), &cfg)?;
            let draft = keygen(&model, &world, &cfg)?;
            draft.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("draft: N={} anchors={} reference={}", draft.n_bits, draft.anchors.len(), draft.reference.len());
            Ok(0)
        }
        Cmd::Inject { base, draft, world, out, ecc, report } => {
            let draft = load_draft(&draft, seed)?;
            check_ecc(ecc, draft.ecc.scheme)?;
            let model = load_model(&base)?;
            let world = load_world(world.as_deref(), &draft.config)?;
            let (wm, inj) = inject_draft(&model, &world, &draft)?;
            save_checkpoint(&wm, &out).stage("save")?;
            let held = held_out(&world, &draft.anchors);
            let summary = InjectSummary {
                injection: serde_json::to_value(&inj)?,
                held_out_accuracy_before: corpus::accuracy(&model, &held)?,
                held_out_accuracy_after: corpus::accuracy(&wm, &held)?,
                model_hash: model_hash(&wm),
            };
            println!(
                "injected: aligned {}/{} mean P(o) {:.4} -> {:.4}",
                inj.n_aligned,
                draft.n_bits,
                inj.mean_prob_before(),
                inj.mean_prob_after()
            );
            if let Some(path) = report {
                write_report(&path, &summary)?;
            }
            Ok(0)
        }
        Cmd::Signatures { model, draft, key } => {
            ensure_apart(&key, &model)?;
            let draft = load_draft(&draft, seed)?;
            let wm = load_model(&model)?;
            let k = finalize_key(&wm, &draft)?;
            k.save(&key).with_context(|| format!("writing {}", key.display()))?;
            println!("key: N={} sentinels={} model {}", k.n_bits, k.sentinels.len(), k.model_hash);
            Ok(0)
        }
        Cmd::Pipeline { cfg, out_dir, key } => cmd_pipeline(&load_config(&cfg, seed)?, &out_dir, &key),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Serve { model } => {
            let query = Loopback::new(load_model(&model)?);
            endpoint::serve(&query, io::stdin().lock(), io::stdout().lock())?;
            Ok(0)
        }
        Cmd::Attack(args) => cmd_attack(args, seed),
        Cmd::EvalLineage { model, key, world, independents, out } => {
            let key = WatermarkKey::load(&key).context("loading key")?;
            let mut cfg = key.config.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let model = load_model(&model)?;
            let world = load_world(world.as_deref(), &cfg)?;
            let derivs = derivative_pool(&model, &world, &cfg)?;
            let indeps = independent_pool(&cfg, &world, independents)?;
            let report = eval_lineage(&key, &derivs, &indeps).stage("lineage")?;
            for e in &report.entries {
                println!("{:<16} {:?} white {:+.4} black {:+.4}", e.name, e.label, e.white_score, e.black_score);
            }
            println!("white AUC {} pAUC {} MD {:.3}", report.white.auc, report.white.pauc, report.white.md);
            println!("black AUC {} pAUC {} MD {:.3}", report.black.auc, report.black.pauc, report.black.md);
            if let Some(path) = out {
                write_report(&path, &report)?;
            }
            Ok(0)
        }
        Cmd::ValidateKey { key, model } => {
            let text = fs::read_to_string(&key).with_context(|| format!("reading {}", key.display()))?;
            let k = WatermarkKey::from_json(&text)?;
            k.validate()?;
            if let Some(path) = model {
                let hash = model_hash(&load_model(&path)?);
                ensure!(hash == k.model_hash, "checkpoint hash {hash} does not match key {}", k.model_hash);
            }
            println!("key valid: N={} ecc={} layers {:?}", k.n_bits, k.ecc.scheme, k.layer_set);
            Ok(0)
        }
    }
}

#[derive(Serialize)]
struct InjectSummary {
    injection: serde_json::Value,
    held_out_accuracy_before: f64,
    held_out_accuracy_after: f64,
    model_hash: String,
}

#[derive(Serialize)]
struct PretrainSummary {
    mean_prob_per_epoch: Vec<f64>,
    confident_fraction: f64,
    model_hash: String,
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::from_json(&text).stage("config")?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = args.ecc {
        cfg.ecc = e;
    }
    cfg.validate().stage("config")?;
    Ok(cfg)
}

fn load_model(path: &Path) -> anyhow::Result<ModelState> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_world(path: Option<&Path>, cfg: &PipelineConfig) -> anyhow::Result<FactWorld> {
    match path {
        Some(p) => FactWorld::load(p).with_context(|| format!("loading world {}", p.display())),
        None => Ok(build_world(cfg)?),
    }
}

fn load_draft(path: &Path, seed: Option<u64>) -> anyhow::Result<KeyDraft> {
    let draft = KeyDraft::load(path).with_context(|| format!("loading draft {}", path.display()))?;
    if let Some(s) = seed {
        ensure!(s == draft.config.seed, "--seed {s} disagrees with the draft's seed {}", draft.config.seed);
    }
    Ok(draft)
}

fn check_ecc(requested: Option<Scheme>, actual: Scheme) -> anyhow::Result<()> {
    match requested {
        Some(r) if r != actual => bail!("--ecc {r} does not match the key's scheme {actual}"),
        _ => Ok(()),
    }
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(&encode_floats(serde_json::to_value(value)?))?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn directory_of(path: &Path) -> anyhow::Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    parent.canonicalize().with_context(|| format!("resolving directory of {}", path.display()))
}

/// The key never sits next to a deployed checkpoint.
fn ensure_apart(key: &Path, model: &Path) -> anyhow::Result<()> {
    ensure!(
        directory_of(key)? != directory_of(model)?,
        "refusing to place the key in the model's directory {}",
        directory_of(model)?.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &PipelineConfig, out_dir: &Path) -> anyhow::Result<u8> {
    fs::create_dir_all(out_dir)?;
    let base = build_base(cfg)?;
    save_checkpoint(&base.model, &out_dir.join("base.ckpt")).stage("save")?;
    base.world.save(&out_dir.join("world.txt")).stage("save")?;
    write_atomic(&out_dir.join("config.json"), cfg.resolved().to_json().as_bytes())?;
    let summary = PretrainSummary {
        mean_prob_per_epoch: base.mean_prob.clone(),
        confident_fraction: base.confident_fraction(cfg.anchor_threshold)?,
        model_hash: model_hash(&base.model),
    };
    write_report(&out_dir.join("pretrain.json"), &summary)?;
    println!(
        "pretrained: {} facts, mean P(o) {:.4}, confident {:.3}",
        base.world.len(),
        base.mean_prob.last().copied().unwrap_or(f64::NAN),
        summary.confident_fraction
    );
    Ok(0)
}

fn cmd_pipeline(cfg: &PipelineConfig, out_dir: &Path, key_path: &Path) -> anyhow::Result<u8> {
    fs::create_dir_all(out_dir)?;
    let model_path = out_dir.join("model.ckpt");
    ensure_apart(key_path, &model_path)?;
    let base = build_base(cfg)?;
    let wm = watermark(&base, cfg)?;
    save_checkpoint(&wm.model, &model_path).stage("save")?;
    write_report(&out_dir.join("report.json"), &wm.report)?;
    write_atomic(&out_dir.join("config.json"), wm.key.config.to_json().as_bytes())?;
    wm.key.save(key_path).stage("save")?;
    let r = &wm.report;
    println!("pipeline: N={} joint={} aligned {}/{}", r.n_bits, r.joint_orthogonal, r.n_aligned, r.n_bits);
    println!("held-out accuracy {:.4} -> {:.4}", r.held_out_accuracy_before, r.held_out_accuracy_after);
    println!("self-check white BER {} black BER {}", r.white_ber, r.black_ber);
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<u8> {
    let key = WatermarkKey::load(&args.key).context("loading key")?;
    key.validate()?;
    check_ecc(args.ecc, key.ecc.scheme)?;
    let report = match args.mode {
        ModeArg::White => {
            let path = args.model.as_deref().ok_or_else(|| anyhow::anyhow!("white mode needs --model"))?;
            verify_white_key(&load_model(path)?, &key).stage("verify")?
        }
        ModeArg::Black => {
            let query: Box<dyn LogitQuery> = match (&args.endpoint, &args.model) {
                (Some(cmd), _) => Box::new(Endpoint::spawn(cmd)?),
                (None, Some(path)) => Box::new(Loopback::new(load_model(path)?)),
                (None, None) => bail!("black mode needs --model or --endpoint"),
            };
            verify_black_key(query.as_ref(), &key, !args.no_reanchor).stage("verify")?
        }
    };
    println!("recovered  {}", report.recovered);
    println!("registered {}", report.registered);
    println!("BER {} (tau {})", report.ber, report.tau);
    if let (Some(p), Some(c)) = (&report.decoded_payload, report.corrected) {
        println!("decoded payload {p} ({c} bits corrected)");
    }
    println!("{}", report.verdict);
    if let Some(path) = &args.report {
        write_report(path, &report)?;
    }
    Ok(if report.owned { 0 } else { EXIT_NOT_OWNED })
}

#[derive(Serialize)]
struct AttackSummary {
    #[serde(flatten)]
    report: submark::attacks::AttackReport,
    config: AttackConfig,
    source_hash: String,
    model_hash: String,
}

fn cmd_attack(args: AttackArgs, seed: Option<u64>) -> anyhow::Result<u8> {
    let cfg = load_config(&ConfigArgs { config: args.config.clone(), ecc: None }, seed)?;
    let model = load_model(&args.model)?;
    let world = load_world(args.world.as_deref(), &cfg)?;
    let tweak = |c: &mut AttackConfig| {
        c.layer_filter = cfg.attack_layers.clone();
        if args.all_layers {
            c.layer_filter = None;
        } else if let Some(l) = &args.layers {
            c.layer_filter = Some(l.clone());
        }
        if let Some(s) = args.steps {
            c.steps = s;
        }
        if let Some(lr) = args.lr {
            c.lr = lr;
        }
        if let Some(r) = args.rank {
            c.rank = r;
        }
        if let Some(b) = args.bits {
            c.n_bits = b;
        }
        if let Some(a) = args.alpha {
            c.alpha = a;
        }
    };
    let mut used = AttackConfig::new(args.kind);
    used.seed = cfg.seed;
    tweak(&mut used);
    let (attacked, report) = match (&args.partner, args.kind) {
        (Some(p), AttackKind::Merge) => attack_merge(&model, &load_model(p)?, &used).stage("attack")?,
        (Some(_), _) => bail!("--partner only applies to merge"),
        (None, _) => run_attack(&model, &world, args.kind, cfg.seed, tweak).stage("attack")?,
    };
    save_checkpoint(&attacked, &args.out).stage("save")?;
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut s = args.out.clone().into_os_string();
        s.push(".report.json");
        PathBuf::from(s)
    });
    let gate_passed = report.gate_passed;
    println!("attack {}: gate {} ({})", args.kind, if gate_passed { "passed" } else { "FAILED" }, report.gate);
    write_report(
        &report_path,
        &AttackSummary { report, config: used, source_hash: model_hash(&model), model_hash: model_hash(&attacked) },
    )?;
    Ok(if gate_passed { 0 } else { EXIT_FAILURE })
}
