//! The `tiletensor` command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or parse error, 3 shape
//! incompatibility, 4 depth exhaustion.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::backend::{BackendConfig, BackendError, Session};
use crate::dense::{relative_error, DenseError, DenseTensor};
use crate::error::{Error, Result};
use crate::linalg::{
    matmul_a, matmul_b, matvec, pack_for_method, parse_extents, pipeline, product_values,
    search_tile_extents, PackingMethod, PipelineOptions, Role,
};
use crate::nn::{
    bootstrap_lower_bound, cryptonets_infer, forward_plain, parse_plan, validate_plan, FilterGroup,
    InferenceOptions, NetworkSpec,
};
use crate::shape::{
    elementwise_result_shape, external_shape, sum_result_shape, ElementwiseOp, TileTensorShape,
};
use crate::tile_tensor::{rotate_and_sum, SumVariant, TileTensor};

#[derive(Debug, Parser)]
#[command(
    name = "tiletensor",
    version,
    about = "Tile tensor packing, shapes and operation counts"
)]
struct Cli {
    /// Slots per tile (defaults depend on the command).
    #[arg(long, global = true)]
    slots: Option<usize>,
    /// Multiplication depth of a fresh tile.
    #[arg(long, global = true, default_value_t = 8)]
    depth: u32,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Rotate-and-sum schedule: ltr, rtl or auto.
    #[arg(long, global = true)]
    sum_variant: Option<SumVariant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Canonicalize a shape and report its layout, or derive a result shape.
    Shape(ShapeArgs),
    /// Pack a dense tensor file into tiles.
    Pack(PackArgs),
    /// Restore a dense tensor from a packed file.
    Unpack(UnpackArgs),
    /// Multiply a matrix by a vector (two tile extents) or a matrix (three).
    Matmul(MatmulArgs),
    /// Apply a chain of matrices to a vector with alternating packings.
    Pipeline(PipelineArgs),
    /// Count the rotations of a rotate-and-sum over n slots.
    BenchSum(BenchSumArgs),
    /// Run a network on the mock backend.
    Infer(InferArgs),
    /// Lower bound on bootstraps per training iteration.
    BootstrapBound(BoundArgs),
    /// Check the shapes and chain indices of a plan file.
    ValidatePlan(PlanArgs),
}

#[derive(Debug, Args)]
struct ShapeArgs {
    shape: String,
    /// Second operand of an elementwise operation.
    #[arg(long)]
    with: Option<String>,
    #[arg(long, default_value = "add", requires = "with")]
    op: ElementwiseOp,
    /// Sum over this dimension (1-based).
    #[arg(long, conflicts_with = "with")]
    sum: Option<usize>,
    #[arg(long)]
    relaxed: bool,
}

#[derive(Debug, Args)]
struct PackArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    shape: String,
    #[arg(long)]
    relaxed: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct UnpackArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MatmulArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// `t1,t2` for matrix-vector, `t1,t2,t3` for matrix-matrix, or one of
    /// row-order, column-order, input-packing, batch-packing.
    #[arg(long)]
    tile: PackingMethod,
    /// Sum over the columns of the transposed left operand instead.
    #[arg(long)]
    transposed: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    matrices: Vec<PathBuf>,
    #[arg(long)]
    vector: PathBuf,
    /// `t1,t2`; omit together with `--search` to rank every factorization.
    #[arg(long, required_unless_present = "search")]
    tile: Option<String>,
    #[arg(long)]
    search: bool,
    #[arg(long)]
    auto_bootstrap: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchSumArgs {
    #[arg(long)]
    n: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(
        long,
        conflicts_with = "cryptonets",
        required_unless_present = "cryptonets"
    )]
    net: Option<PathBuf>,
    #[arg(long)]
    cryptonets: bool,
    /// `t1,t2,t3`.
    #[arg(long, default_value = "32,256,1")]
    tile: String,
    /// Dense tensor `[n, features]` or `[n, h, w]`.
    #[arg(long, conflicts_with = "random")]
    batch: Option<PathBuf>,
    /// Seeded random batch of this many samples.
    #[arg(long)]
    random: Option<usize>,
    /// Also run the plaintext forward pass and report the deviation.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    auto_bootstrap: bool,
    /// Write logits `[n, outputs]` here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BoundArgs {
    /// `COUNTxHxW:ROWS`, repeatable.
    #[arg(long = "group")]
    groups: Vec<FilterGroup>,
    /// Named filter configuration (`cnn-static`).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    plan: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Io { .. } => 1,
        Error::Parse(_) | Error::InvalidArgument(_) => 2,
        Error::Dense(DenseError::Parse { .. }) => 2,
        Error::Shape(s) if s.is_syntax() => 2,
        Error::Backend(BackendError::DepthExhausted { .. }) => 4,
        Error::Backend(BackendError::Config(_)) => 2,
        _ => 3,
    }
}

/// Sizes the global rayon pool from `TILETENSOR_THREADS`, if set.
pub fn init_threads() {
    if let Some(n) = std::env::var("TILETENSOR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // an already-initialized pool keeps its size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn read_tensor(path: &Path) -> Result<DenseTensor> {
    let text = read(path)?;
    DenseTensor::from_text(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => out
            .write_all(text.as_bytes())
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

fn shape_arg(text: &str) -> Result<TileTensorShape> {
    text.parse::<TileTensorShape>()
        .map_err(|e| match e.caret(text) {
            Some(c) => Error::Parse(format!("{e}\n{c}")),
            None => e.into(),
        })
}

fn session(cli: &Cli, default_slots: usize) -> Result<std::sync::Arc<Session>> {
    Ok(Session::with_slots(
        cli.slots.unwrap_or(default_slots),
        cli.depth,
    )?)
}

fn variant(cli: &Cli) -> SumVariant {
    cli.sum_variant.unwrap_or_default()
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Shape(a) => emit(out, None, &cmd_shape(cli, a)?)?,
        Command::Pack(a) => cmd_pack(cli, a, out)?,
        Command::Unpack(a) => cmd_unpack(cli, a, out)?,
        Command::Matmul(a) => cmd_matmul(cli, a, out)?,
        Command::Pipeline(a) => cmd_pipeline(cli, a, out)?,
        Command::BenchSum(a) => cmd_bench_sum(cli, a, out, err)?,
        Command::Infer(a) => cmd_infer(cli, a, out)?,
        Command::BootstrapBound(a) => emit(out, None, &cmd_bootstrap_bound(cli, a)?)?,
        Command::ValidatePlan(a) => return cmd_validate_plan(cli, a, out),
    }
    Ok(0)
}

fn cmd_validate_plan(cli: &Cli, a: &PlanArgs, out: &mut dyn Write) -> Result<i32> {
    let steps = parse_plan(&read(&a.plan)?)?;
    let config = BackendConfig::new(cli.slots.unwrap_or(8192), cli.depth)?;
    let report = validate_plan(&steps, &config);
    emit(out, None, &report.to_string())?;
    Ok(if report.ok() {
        0
    } else if report
        .violations
        .iter()
        .all(|v| v.message.contains("depth exhausted"))
    {
        4
    } else {
        3
    })
}

fn cmd_shape(cli: &Cli, a: &ShapeArgs) -> Result<String> {
    let shape = shape_arg(&a.shape)?.with_relaxed(a.relaxed);
    if let Some(s) = cli.slots {
        shape.check_slots(s)?;
    }
    let ext = external_shape(&shape);
    let occupied: usize = shape.dims().iter().map(|d| d.n * d.d).product();
    let values: usize = shape.tensor_shape().iter().product();
    let fmt_list = |v: &[usize]| {
        v.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut text = format!(
        "shape={shape}\nexternal=[{}]\ntiles={}\nvalues={values}\noccupied_slots={occupied}\ntotal_slots={}\n",
        fmt_list(ext.extents()),
        ext.tile_count(),
        ext.tile_count() * shape.tile_slots()
    );
    if let Some(other) = &a.with {
        let b = shape_arg(other)?;
        let r = elementwise_result_shape(&shape, &b, a.op)?;
        text.push_str(&format!("result={r}\n"));
    } else if let Some(dim) = a.sum {
        text.push_str(&format!("result={}\n", sum_result_shape(&shape, dim)?));
    }
    Ok(text)
}

fn cmd_pack(cli: &Cli, a: &PackArgs, out: &mut dyn Write) -> Result<()> {
    let tensor = read_tensor(&a.input)?;
    let shape = shape_arg(&a.shape)?.with_relaxed(a.relaxed);
    let ses = session(cli, shape.tile_slots())?;
    let t = TileTensor::pack(&tensor, &shape, &ses)?;
    let mut text = format!("shape: {}\nslots: {}\n", t.shape(), ses.slot_count());
    if shape.relaxed() {
        text.push_str("relaxed: true\n");
    }
    for tile in t.tiles() {
        let line: Vec<String> = tile.slots().iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    emit(out, a.output.as_deref(), &text)
}

fn cmd_unpack(cli: &Cli, a: &UnpackArgs, out: &mut dyn Write) -> Result<()> {
    let text = read(&a.input)?;
    let mut shape: Option<TileTensorShape> = None;
    let mut slots: Option<usize> = None;
    let mut relaxed = false;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let perr = |msg: String| Error::Parse(format!("{}:{}: {msg}", a.input.display(), no + 1));
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(s) = line.strip_prefix("shape:") {
            shape = Some(shape_arg(s.trim())?);
        } else if let Some(s) = line.strip_prefix("slots:") {
            slots = Some(
                s.trim()
                    .parse()
                    .map_err(|_| perr(format!("bad slot count `{}`", s.trim())))?,
            );
        } else if let Some(s) = line.strip_prefix("relaxed:") {
            relaxed = s.trim() == "true";
        } else {
            let row = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| perr(format!("bad value `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
    }
    let shape = shape
        .ok_or_else(|| Error::Parse(format!("{}: missing `shape:` header", a.input.display())))?
        .with_relaxed(relaxed);
    let slots = slots.or(cli.slots).unwrap_or(shape.tile_slots());
    let ses = Session::with_slots(slots, cli.depth)?;
    let tiles = rows
        .into_iter()
        .map(|r| ses.make_tile(r))
        .collect::<Result<Vec<_>, _>>()?;
    let t = TileTensor::from_parts(shape, tiles, ses)?;
    emit(out, a.output.as_deref(), &t.unpack().to_text())
}

fn cmd_matmul(cli: &Cli, a: &MatmulArgs, out: &mut dyn Write) -> Result<()> {
    let m = read_tensor(&a.a)?;
    let x = read_tensor(&a.b)?;
    let slots = match (&a.tile, cli.slots) {
        (_, Some(s)) => s,
        (PackingMethod::General(t), None) => t.iter().product(),
        (other, None) => {
            return Err(Error::invalid(format!("{other} needs --slots")));
        }
    };
    let ses = Session::with_slots(slots, cli.depth)?;
    let v = variant(cli);
    let result = match &a.tile {
        PackingMethod::General(t) if t.len() == 3 => {
            if a.transposed {
                let l = pack_for_method(&m, Role::TransposedLhs, &a.tile, &ses)?;
                let r = pack_for_method(&x, Role::ColumnRhs, &a.tile, &ses)?;
                matmul_b(&l, &r, v)?
            } else {
                let l = pack_for_method(&m, Role::Lhs, &a.tile, &ses)?;
                let r = pack_for_method(&x, Role::Rhs, &a.tile, &ses)?;
                matmul_a(&l, &r, v)?
            }
        }
        method => matvec(&m, &x, method, &ses, v)?,
    };
    let values = product_values(&result);
    let rows = m.shape()[0];
    let values = if values.len().is_multiple_of(rows) && values.len() > rows {
        values.reshape(&[rows, values.len() / rows])?
    } else {
        values
    };
    let mut report = format!("result_shape={}\n{}", result.shape(), ses.cost_report());
    if a.output.is_none() {
        report.push('\n');
        report.push_str(&values.to_text());
    } else {
        emit(out, a.output.as_deref(), &values.to_text())?;
    }
    emit(out, None, &report)
}

fn cmd_pipeline(cli: &Cli, a: &PipelineArgs, out: &mut dyn Write) -> Result<()> {
    let matrices = a
        .matrices
        .iter()
        .map(|p| read_tensor(p))
        .collect::<Result<Vec<_>>>()?;
    let v = read_tensor(&a.vector)?;
    let options = PipelineOptions {
        variant: variant(cli),
        auto_bootstrap: a.auto_bootstrap,
    };
    if a.search {
        let slots = cli
            .slots
            .ok_or_else(|| Error::invalid("--search needs --slots"))?;
        let ranked = search_tile_extents(&matrices, &v, slots, cli.depth, options)?;
        let mut text = String::new();
        for c in &ranked {
            text.push_str(&format!(
                "tile={}x{} score={} multiplications={} rotations={} mask_multiplications={} additions={}\n",
                c.tile[0],
                c.tile[1],
                c.score(),
                c.cost.multiplications,
                c.cost.rotations,
                c.cost.mask_multiplications,
                c.cost.additions
            ));
        }
        return emit(out, None, &text);
    }
    let ext = parse_extents(a.tile.as_deref().unwrap_or_default()).map_err(Error::Parse)?;
    let [t1, t2] = ext[..] else {
        return Err(Error::invalid(format!(
            "pipeline needs two tile extents, got {}",
            ext.len()
        )));
    };
    let ses = session(cli, t1 * t2)?;
    let run = pipeline(&matrices, &v, [t1, t2], &ses, options)?;
    let mut report = format!("result_shape={}\n{}", run.result.shape(), run.cost);
    if a.output.is_none() {
        report.push('\n');
        report.push_str(&run.vector().to_text());
    } else {
        emit(out, a.output.as_deref(), &run.vector().to_text())?;
    }
    emit(out, None, &report)
}

fn cmd_bench_sum(
    cli: &Cli,
    a: &BenchSumArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let slots = cli.slots.unwrap_or(4096);
    if a.n == 0 || a.n > slots {
        return Err(Error::invalid(format!(
            "n must be in 1..={slots}, got {}",
            a.n
        )));
    }
    let variants = match cli.sum_variant {
        Some(v) => vec![v],
        None => vec![SumVariant::LeftToRight, SumVariant::RightToLeft],
    };
    let mut text = String::new();
    for v in variants {
        let ses = Session::with_slots(slots, cli.depth)?;
        let values: Vec<f64> = (0..slots)
            .map(|i| if i < a.n { (i % 97) as f64 + 1.0 } else { 0.0 })
            .collect();
        let expected: f64 = values.iter().sum();
        let tile = ses.make_tile(values)?;
        let start = Instant::now();
        let r = rotate_and_sum(&ses, &tile, a.n, 1, v)?;
        let elapsed = start.elapsed();
        let cost = ses.cost_report();
        text.push_str(&format!(
            "variant={}\nn={}\nslots={slots}\nrotations={}\nadditions={}\ncorrect={}\n\n",
            v.name(),
            a.n,
            cost.rotations,
            cost.additions,
            r.slots()[0] == expected
        ));
        let _ = writeln!(err, "{} wall_time_us={}", v.name(), elapsed.as_micros());
    }
    emit(out, None, text.trim_end_matches('\n').to_string().as_str())?;
    emit(out, None, "\n")
}

fn cmd_infer(cli: &Cli, a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let net = match &a.net {
        Some(p) => NetworkSpec::parse(&read(p)?, p.parent())?,
        None => NetworkSpec::cryptonets(),
    };
    let net = net.with_random_weights(cli.seed);
    let batch = match (&a.batch, a.random) {
        (Some(p), _) => read_tensor(p)?,
        (None, Some(n)) => net.random_batch(n, cli.seed.wrapping_add(1))?,
        (None, None) => net.random_batch(1, cli.seed.wrapping_add(1))?,
    };
    let ext = parse_extents(&a.tile).map_err(Error::Parse)?;
    let [t1, t2, t3] = ext[..] else {
        return Err(Error::invalid(format!(
            "inference needs three tile extents, got {}",
            ext.len()
        )));
    };
    let ses = session(cli, t1 * t2 * t3)?;
    let options = InferenceOptions {
        variant: variant(cli),
        auto_bootstrap: a.auto_bootstrap,
    };
    let run = cryptonets_infer(&net, &batch, [t1, t2, t3], &ses, options)?;
    let mut report = format!("tile={t1}x{t2}x{t3}\nbatch={}\n", run.logits.shape()[0]);
    for (i, s) in run.layer_shapes.iter().enumerate() {
        report.push_str(&format!("stage{}={s}\n", i + 1));
    }
    report.push_str(&run.cost.to_string());
    if a.oracle {
        let want = forward_plain(&net, &batch)?;
        report.push_str(&format!(
            "max_relative_deviation={:e}\n",
            relative_error(&run.logits, &want)
        ));
    }
    if a.output.is_none() {
        report.push('\n');
        report.push_str(&run.logits.to_text());
    } else {
        emit(out, a.output.as_deref(), &run.logits.to_text())?;
    }
    emit(out, None, &report)
}

fn cmd_bootstrap_bound(cli: &Cli, a: &BoundArgs) -> Result<String> {
    let mut groups = a.groups.clone();
    match a.preset.as_deref() {
        Some("cnn-static") => groups.extend(FilterGroup::cnn_static()),
        Some(other) => return Err(Error::invalid(format!("unknown preset `{other}`"))),
        None => {}
    }
    if groups.is_empty() {
        return Err(Error::invalid("give at least one --group or --preset"));
    }
    let bound = bootstrap_lower_bound(&groups, cli.depth)?;
    Ok(format!("depth={}\nbootstraps={bound}\n", cli.depth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("tiletensor").chain(args.iter().copied());
        let code = run(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn shape_reports() {
        let (code, out, _) = call(&["shape", "[4,3/8,5/16]", "--sum", "2"]);
        assert_eq!(code, 0);
        assert!(out.contains("result=[4,*/8,5/16]"), "{out}");
        let (_, out, _) = call(&["shape", "[5/2,6/4]"]);
        assert!(out.contains("external=[3,2]"));
        assert!(out.contains("occupied_slots=30"));
        assert!(out.contains("total_slots=48"));
    }

    #[test]
    fn exit_codes() {
        let (code, _, err) = call(&["shape", "[4,3/x]"]);
        assert_eq!(code, 2);
        assert!(err.contains('^'), "{err}");
        let (code, _, _) = call(&["shape", "[4/4]", "--with", "[5/4]"]);
        assert_eq!(code, 3);
        let (code, _, _) = call(&["bogus"]);
        assert_eq!(code, 2);
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("bench-sum"));
    }

    #[test]
    fn bench_sum_counts() {
        let (_, out, _) = call(&["bench-sum", "--n", "1190"]);
        assert_eq!(out.matches("rotations=14").count(), 2, "{out}");
        assert_eq!(out.matches("correct=true").count(), 2);
        let (_, out, _) = call(&["bench-sum", "--n", "1", "--sum-variant", "rtl"]);
        assert!(out.contains("rotations=0"));
    }

    #[test]
    fn bound_command() {
        let (_, out, _) = call(&["bootstrap-bound", "--preset", "cnn-static", "--depth", "3"]);
        assert!(out.contains("bootstraps=1088"));
        let (_, out, _) = call(&["bootstrap-bound", "--group", "1x3x50:18", "--depth", "3"]);
        assert!(out.contains("bootstraps=18"));
    }
}
