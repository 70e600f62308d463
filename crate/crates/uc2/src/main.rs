use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use uc2::cluster::{
    filter_invalid_centroids, remap_index, two_stage_cluster, Allocation, ClusterConfig,
};
use uc2::dist::sq_dist;
use uc2::error::{Error, Result};
use uc2::io;
use uc2::metrics::{
    assignment_entropy, codebook_objective, mutual_information_estimate, quantization_distortion,
    rate_distortion_scan, regularized_loss, utilization,
};
use uc2::quantize::{quantize_batch, quantize_hierarchical, CascadedCodebook};
use uc2::synth::{gen_synth, SynthSpec};
use uc2::train::{
    grad_check_max_rel_err, train_cascade, vq_baseline_train, CollapseInit, CollapseSimConfig,
    Pooling, ProjectionMap, TrainConfig, UpdateTargets,
};
use uc2::types::{l2_normalize_rows, AssignmentHistogram, EmbeddingMatrix, TokenSequence};

/// Codebook construction, quantization and codebook-health metrics over
/// UC2E/UC2C/UC2T files.
#[derive(Parser)]
#[command(name = "uc2", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded Gaussian-mixture embedding corpus.
    GenSynth(GenSynthArgs),
    /// Build a codebook by two-stage clustering, filter invalid centroids,
    /// and write it with its search index.
    Build(BuildArgs),
    /// Quantize a corpus against a codebook, writing tokens and a report.
    Quantize(QuantizeArgs),
    /// Utilization / entropy / distortion / MI report for a token file.
    Metrics(MetricsArgs),
    /// Cluster at several K and fit the log-log distortion slope.
    RdScan(RdScanArgs),
    /// Toy contrastive training of the trainable codebook table.
    CascadeTrain(CascadeTrainArgs),
    /// Partial-update VQ baseline; traces codebook utilization per epoch.
    CollapseSim(CollapseSimArgs),
    /// Finite-difference audit of the contrastive gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    components: usize,
    /// Minimum distance between component means, in sigma units.
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    #[arg(long, env = "UC2_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write component ids to <out>.labels.
    #[arg(long)]
    labeled: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum AllocArg {
    Fixed,
    Proportional,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    k1: usize,
    #[arg(long, value_enum, default_value_t = AllocArg::Fixed)]
    alloc: AllocArg,
    #[arg(long, env = "UC2_ITERS", default_value_t = 50)]
    iters: usize,
    #[arg(long, env = "UC2_TOL", default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, env = "UC2_SEED", default_value_t = 0)]
    seed: u64,
    /// L2-normalize rows before clustering.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    Exact,
    Hier,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    mode: ModeArg,
    /// Coarse cells to probe in hier mode; default ceil(K1/8).
    #[arg(long)]
    nprobe: Option<usize>,
    /// Rows per written token sequence; default one sequence for the corpus.
    #[arg(long)]
    seq_len: Option<usize>,
    /// L2-normalize rows before quantization.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write a key=value metrics report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, env = "UC2_LAMBDA", default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, env = "UC2_BETA", default_value_t = 1.0)]
    beta: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RdScanArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Comma-separated strictly increasing codebook sizes.
    #[arg(long, value_delimiter = ',')]
    k_list: Vec<usize>,
    #[arg(long, env = "UC2_ITERS", default_value_t = 100)]
    iters: usize,
    #[arg(long, env = "UC2_TOL", default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, env = "UC2_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct CascadeTrainArgs {
    #[arg(long)]
    codebook: PathBuf,
    /// Patch embeddings, consecutive rows grouped into sequences.
    #[arg(long)]
    patches: PathBuf,
    /// One prompt embedding row per sequence.
    #[arg(long)]
    prompts: PathBuf,
    /// Patch rows per sequence.
    #[arg(long)]
    seq_len: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, env = "UC2_TAU", default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, env = "UC2_SEED", default_value_t = 0)]
    seed: u64,
    /// Freeze the trainable table and update only the projection.
    #[arg(long)]
    projection_only: bool,
    /// Held-out corpus for the utilization trace.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Trained table goes here (UC2C); the projection map is written
    /// alongside as <out>.proj.uc2e.
    #[arg(long)]
    out_cascade: PathBuf,
    /// Append-only CSV: step,loss,utilization,wall_ms.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum InitArg {
    Clustered,
    Random,
}

#[derive(Args)]
struct CollapseSimArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum)]
    init: InitArg,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.25)]
    commit: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, env = "UC2_SEED", default_value_t = 0)]
    seed: u64,
    /// CSV: step,loss,utilization,wall_ms (one row per epoch).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("error code=1 msg={:?}", e.to_string());
            std::process::exit(1);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error code={} msg={:?}", err.exit_code(), err.to_string());
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenSynth(a) => cmd_gen_synth(a),
        Cmd::Build(a) => cmd_build(a),
        Cmd::Quantize(a) => cmd_quantize(a),
        Cmd::Metrics(a) => cmd_metrics(a),
        Cmd::RdScan(a) => cmd_rd_scan(a),
        Cmd::CascadeTrain(a) => cmd_cascade_train(a),
        Cmd::CollapseSim(a) => cmd_collapse_sim(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
    }
}

fn cmd_gen_synth(a: GenSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n: a.n,
        dim: a.dim,
        components: a.components,
        separation: a.separation,
        seed: a.seed,
        labeled: a.labeled,
    };
    let data = gen_synth(&spec)?;
    io::write_embeddings(&a.out, &data.embeddings)?;
    if let Some(labels) = &data.labels {
        let labels_path = labels_path_for(&a.out);
        io::write_labels(&labels_path, labels)?;
        println!("labels={}", labels_path.display());
    }
    println!("n={} dim={} components={} out={}", a.n, a.dim, a.components, a.out.display());
    Ok(())
}

fn labels_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".labels");
    PathBuf::from(s)
}

fn cmd_build(a: BuildArgs) -> Result<()> {
    let start = Instant::now();
    let mut data = io::read_embeddings(&a.input, true)?;
    if a.normalize {
        l2_normalize_rows(&mut data);
    }
    let cfg = ClusterConfig::new(a.k).with_seed(a.seed).with_iters(a.iters).with_tol(a.tol);
    let alloc = match a.alloc {
        AllocArg::Fixed => Allocation::Fixed,
        AllocArg::Proportional => Allocation::Proportional,
    };
    let res = two_stage_cluster(&data, a.k, a.k1, &cfg, alloc)?;
    let (codebook, remap) = filter_invalid_centroids(&res.codebook)?;
    let index = remap_index(&res.index, &remap)?;
    io::write_codebook(&a.out, &codebook, Some(&index))?;

    // SSE of the construction assignments against the filtered codebook;
    // rows whose centroid was filtered away are re-quantized exactly.
    let mut sse = 0.0f64;
    for (row, &assign) in data.rows().zip(&res.assignments) {
        match remap[assign as usize] {
            Some(new_id) => sse += sq_dist(row, codebook.centroid(new_id)),
            None => sse += {
                let id = uc2::quantize::quantize_exact(row, &codebook)?;
                sq_dist(row, codebook.centroid(id))
            },
        }
    }
    for note in &res.notes {
        eprintln!("note: {note}");
    }
    println!(
        "k_requested={} k_final={} sse={} wall_ms={:.1}",
        res.k_requested,
        codebook.k(),
        sse,
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let mut data = io::read_embeddings(&a.input, true)?;
    if a.normalize {
        l2_normalize_rows(&mut data);
    }
    let (codebook, index) = io::read_codebook(&a.codebook)?;
    codebook.centroids().validate()?;

    let tokens: Vec<u32> = match a.mode {
        ModeArg::Exact => quantize_batch(&data, &codebook)?.0.tokens().to_vec(),
        ModeArg::Hier => {
            let index = index.as_ref().ok_or_else(|| {
                Error::InvalidConfig("codebook file carries no index; use --mode exact".into())
            })?;
            let nprobe = a.nprobe.unwrap_or_else(|| (index.k1() + 7) / 8);
            let mut out = Vec::with_capacity(data.n_rows());
            let mut fallbacks = 0usize;
            for row in data.rows() {
                let hit = quantize_hierarchical(row, &codebook, index, nprobe)?;
                if hit.fell_back_to_exact {
                    fallbacks += 1;
                }
                out.push(hit.id);
            }
            if fallbacks > 0 {
                eprintln!("note: {fallbacks} query(ies) fell back to an exact scan");
            }
            out
        }
    };

    let seq_len = a.seq_len.unwrap_or(data.n_rows().max(1));
    if seq_len == 0 || (data.n_rows() > 0 && data.n_rows() % seq_len != 0) {
        return Err(Error::InvalidConfig(format!(
            "seq_len = {seq_len} does not divide corpus size {}",
            data.n_rows()
        )));
    }
    let sequences: Vec<TokenSequence> = tokens
        .chunks(seq_len.max(1))
        .map(|c| TokenSequence::new(c.to_vec(), codebook.k()))
        .collect::<Result<_>>()?;
    io::write_tokens(&a.out, &sequences, codebook.k())?;

    let hist = AssignmentHistogram::from_assignments(&tokens, codebook.k())?;
    let report = quantization_distortion(&data, &codebook, &tokens)?;
    let entropy = assignment_entropy(&hist)?;
    let pairs = vec![
        ("k".to_string(), format!("{}", codebook.k())),
        ("n".to_string(), format!("{}", data.n_rows())),
        ("utilization".to_string(), format!("{}", utilization(&hist)?)),
        ("entropy_nats".to_string(), format!("{entropy}")),
        ("entropy_bits".to_string(), format!("{}", entropy / std::f64::consts::LN_2)),
        ("distortion".to_string(), format!("{}", report.total)),
        ("variance_bound".to_string(), format!("{}", report.variance_bound)),
        ("variance_bound_violated".to_string(), format!("{}", report.bound_violated)),
    ];
    emit_report(a.report.as_deref(), &pairs)?;
    Ok(())
}

fn emit_report(path: Option<&Path>, pairs: &[(String, String)]) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            for (k, v) in pairs {
                writeln!(w, "{k}={v}")?;
            }
            w.flush()?;
        }
        None => {
            for (k, v) in pairs {
                println!("{k}={v}");
            }
        }
    }
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let (sequences, k) = io::read_tokens(&a.tokens)?;
    let tokens: Vec<u32> = sequences.iter().flat_map(|s| s.tokens().iter().copied()).collect();
    let hist = AssignmentHistogram::from_assignments(&tokens, k)?;
    let entropy = assignment_entropy(&hist)?;
    let mut pairs = vec![
        ("k".to_string(), format!("{k}")),
        ("n".to_string(), format!("{}", tokens.len())),
        ("utilization".to_string(), format!("{}", utilization(&hist)?)),
        ("entropy_nats".to_string(), format!("{entropy}")),
        ("entropy_bits".to_string(), format!("{}", entropy / std::f64::consts::LN_2)),
    ];

    let mut distortion = None;
    if let (Some(emb_path), Some(cb_path)) = (&a.embeddings, &a.codebook) {
        let data = io::read_embeddings(emb_path, true)?;
        let (codebook, _) = io::read_codebook(cb_path)?;
        if data.n_rows() != tokens.len() {
            return Err(Error::LengthMismatch(format!(
                "{} tokens vs {} embedding rows",
                tokens.len(),
                data.n_rows()
            )));
        }
        let report = quantization_distortion(&data, &codebook, &tokens)?;
        let obj = codebook_objective(&data, &codebook, &tokens, a.lambda)?;
        distortion = Some(report.total);
        pairs.push(("distortion".to_string(), format!("{}", report.total)));
        pairs.push(("variance_bound".to_string(), format!("{}", report.variance_bound)));
        pairs.push((
            "variance_bound_violated".to_string(),
            format!("{}", report.bound_violated),
        ));
        pairs.push(("objective_lambda".to_string(), format!("{}", a.lambda)));
        pairs.push(("objective_total".to_string(), format!("{}", obj.total)));
        pairs.push(("objective_alignment".to_string(), format!("{}", obj.alignment_term)));
        pairs.push(("objective_spread".to_string(), format!("{}", obj.utilization_term)));
    }
    if let Some(d) = distortion {
        pairs.push(("beta".to_string(), format!("{}", a.beta)));
        pairs.push((
            "regularized_loss".to_string(),
            format!("{}", regularized_loss(d, entropy, a.beta)),
        ));
    }
    if let Some(labels_path) = &a.labels {
        let labels = io::read_labels(labels_path)?;
        let seq = TokenSequence::new(tokens.clone(), k)?;
        let (i_hat, h_v) = mutual_information_estimate(&seq, &labels)?;
        pairs.push(("mi_nats".to_string(), format!("{i_hat}")));
        pairs.push(("token_entropy_nats".to_string(), format!("{h_v}")));
    }
    emit_report(a.out.as_deref(), &pairs)?;
    Ok(())
}

fn cmd_rd_scan(a: RdScanArgs) -> Result<()> {
    let mut data = io::read_embeddings(&a.input, true)?;
    if a.normalize {
        l2_normalize_rows(&mut data);
    }
    let cfg = ClusterConfig::new(1).with_seed(a.seed).with_iters(a.iters).with_tol(a.tol);
    let scan = rate_distortion_scan(&data, &a.k_list, &cfg)?;
    for &(k, d) in &scan.points {
        println!("k={k} distortion={d}");
    }
    match scan.slope {
        Some(s) => println!("slope={s}"),
        None => println!("slope=degenerate"),
    }
    println!("ideal_slope={}", -2.0 / data.dim() as f64);
    Ok(())
}

fn write_trace_csv(path: &Path, rows: &[(String, String, String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,loss,utilization,wall_ms")?;
    for (step, loss, util, wall) in rows {
        writeln!(w, "{step},{loss},{util},{wall}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_cascade_train(a: CascadeTrainArgs) -> Result<()> {
    let (codebook, index) = io::read_codebook(&a.codebook)?;
    codebook.centroids().validate()?;
    let patches = io::read_embeddings(&a.patches, true)?;
    let prompts = io::read_embeddings(&a.prompts, true)?;
    if a.seq_len == 0 || patches.n_rows() % a.seq_len != 0 {
        return Err(Error::InvalidConfig(format!(
            "seq_len = {} does not divide patch rows {}",
            a.seq_len,
            patches.n_rows()
        )));
    }
    let n_items = patches.n_rows() / a.seq_len;
    if prompts.n_rows() != n_items {
        return Err(Error::LengthMismatch(format!(
            "{} prompt rows for {} sequences",
            prompts.n_rows(),
            n_items
        )));
    }
    let d = patches.dim();
    let d_prime = prompts.dim();
    let mut dataset = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let rows = patches.values()[i * a.seq_len * d..(i + 1) * a.seq_len * d].to_vec();
        let item = EmbeddingMatrix::new(a.seq_len, d, rows)?;
        let prompt: Vec<f64> = prompts.row(i).iter().map(|&v| v as f64).collect();
        dataset.push((item, prompt));
    }

    let mut cascade = CascadedCodebook::from_frozen(codebook, index);
    let frozen_before = cascade.frozen_checksum();
    let mut proj = if d_prime == cascade.d2() {
        ProjectionMap::identity(d_prime)
    } else {
        ProjectionMap::random(d_prime, cascade.d2(), a.seed)
    };
    let cfg = TrainConfig {
        lr: a.lr,
        tau_temp: a.tau,
        batch_size: a.batch,
        steps: a.steps,
        seed: a.seed,
        pooling: Pooling::Mean,
        update_targets: UpdateTargets { c2_table: !a.projection_only, projection: true },
        eval_every: (a.steps / 10).max(1),
    };
    let eval = match &a.eval {
        Some(p) => Some(io::read_embeddings(p, true)?),
        None => None,
    };
    let trace = train_cascade(&mut cascade, &mut proj, &dataset, &cfg, eval.as_ref())?;
    assert_eq!(cascade.frozen_checksum(), frozen_before);

    // trained table as a UC2C file (f32), projection alongside
    let table_f32: Vec<f32> = cascade.trainable().iter().map(|&v| v as f32).collect();
    let table = uc2::types::Codebook::new(
        EmbeddingMatrix::new(cascade.k(), cascade.d2(), table_f32)?,
        uc2::types::CodebookMeta { seed: a.seed, source_hash: 0, iterations: a.steps as u32 },
    )?;
    io::write_codebook(&a.out_cascade, &table, None)?;
    let proj_path = {
        let mut s = a.out_cascade.as_os_str().to_os_string();
        s.push(".proj.uc2e");
        PathBuf::from(s)
    };
    // d_out rows of (d_in weights + bias) per row
    let mut proj_values = Vec::with_capacity(proj.d_out * (proj.d_in + 1));
    for r in 0..proj.d_out {
        for c in 0..proj.d_in {
            proj_values.push(proj.weights[r * proj.d_in + c] as f32);
        }
        proj_values.push(proj.bias[r] as f32);
    }
    io::write_embeddings(&proj_path, &EmbeddingMatrix::new(proj.d_out, proj.d_in + 1, proj_values)?)?;

    if let Some(trace_path) = &a.trace {
        let rows: Vec<_> = trace
            .iter()
            .map(|r| {
                (
                    r.step.to_string(),
                    r.loss.to_string(),
                    r.utilization.map(|u| u.to_string()).unwrap_or_default(),
                    format!("{:.3}", r.wall_ms),
                )
            })
            .collect();
        write_trace_csv(trace_path, &rows)?;
    }
    let first = trace.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "steps={} first_loss={first} last_loss={last} out={}",
        trace.len(),
        a.out_cascade.display()
    );
    Ok(())
}

fn cmd_collapse_sim(a: CollapseSimArgs) -> Result<()> {
    let start = Instant::now();
    let train = io::read_embeddings(&a.train, true)?;
    let eval = io::read_embeddings(&a.eval, true)?;
    let cfg = CollapseSimConfig {
        k: a.k,
        init: match a.init {
            InitArg::Clustered => CollapseInit::Clustered,
            InitArg::Random => CollapseInit::RandomGaussian,
        },
        commit_weight: a.commit,
        lr: a.lr,
        steps: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
    };
    let res = vq_baseline_train(&cfg, &train, &eval)?;
    if let Some(trace_path) = &a.trace {
        let rows: Vec<_> = res
            .utilization_trace
            .iter()
            .enumerate()
            .map(|(epoch, &u)| {
                let loss = if epoch == 0 {
                    String::new()
                } else {
                    res.loss_trace[epoch - 1].to_string()
                };
                (
                    epoch.to_string(),
                    loss,
                    u.to_string(),
                    format!("{:.3}", start.elapsed().as_secs_f64() * 1e3),
                )
            })
            .collect();
        write_trace_csv(trace_path, &rows)?;
    }
    println!(
        "k={} initial_utilization={} final_utilization={} epochs={} wall_ms={:.1}",
        res.codebook.k(),
        res.utilization_trace[0],
        res.utilization_trace.last().unwrap(),
        a.epochs,
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    let mut worst: f64 = 0.0;
    for seed in 0..a.seeds {
        let err = grad_check_max_rel_err(seed)?;
        if err > worst {
            worst = err;
        }
        println!("seed={seed} max_rel_err={err:e}");
    }
    println!("worst={worst:e} threshold=1e-4");
    if worst > 1e-4 {
        return Err(Error::Divergence { step: 0 });
    }
    Ok(())
}
