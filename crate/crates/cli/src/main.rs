mod config;
mod viz;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hle_core::decoder::{decode, DecoderConfig};
use hle_core::embed::{PixelFields, SemanticState};
use hle_core::format;
use hle_core::gradcheck::{check_term, GradCheckConfig, GradTerm};
use hle_core::grid::{ClassCatalog, FieldGrid, PanopticMap};
use hle_core::metrics::{
    average_precision, coco_thresholds, mean_iou, panoptic_quality, parsing_covering, pq_dagger, thing_masks, PqResult,
};
use hle_core::synth::{generate, standard_catalog, suite_scene, Scene, SceneSpec};
use hle_core::thomson::{dot_range, thomson_run, ThomsonConfig};
use hle_core::trainer::{evaluate_toy, train};

use config::RunConfig;

/// Hierarchical Lovász embeddings: synthetic scenes, training, decoding and evaluation.
#[derive(Parser)]
#[command(name = "hle", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic scene to label and instance rasters.
    GenScene(GenScene),
    /// Spread k unit vectors over the sphere in d dimensions.
    Thomson(ThomsonArgs),
    /// Optimize per-pixel fields against a scene.
    Train(TrainArgs),
    /// Turn fields into a panoptic map.
    Decode(DecodeArgs),
    /// Score a predicted panoptic map against ground truth.
    Eval(EvalArgs),
    /// Decode time and PQ across downsampling factors, as CSV.
    BenchDownsample(BenchArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Export embeddings as PPM images.
    Viz(VizArgs),
}

/// Where a scene comes from: a named standard scene or a label/instance pair.
#[derive(Args)]
struct SceneSource {
    /// Standard scene name (tiny, small, occluded, dense).
    #[arg(long, conflicts_with_all = ["labels", "instances"])]
    suite: Option<String>,
    /// Label raster (HLE1).
    #[arg(long, requires = "instances")]
    labels: Option<PathBuf>,
    /// Instance raster (HLE1).
    #[arg(long, requires = "labels")]
    instances: Option<PathBuf>,
}

impl SceneSource {
    fn load(&self, catalog: &ClassCatalog) -> Result<Scene> {
        match (&self.suite, &self.labels, &self.instances) {
            (Some(name), _, _) => {
                let spec = suite_scene(name).with_context(|| format!("no standard scene named {name:?}"))?;
                Ok(generate(&spec, catalog)?)
            }
            (None, Some(l), Some(i)) => {
                let scene = Scene { labels: format::read_labels(l)?, instances: format::read_instances(i)? };
                hle_core::grid::ensure_valid(&scene.labels, &scene.instances, catalog)?;
                Ok(scene)
            }
            _ => bail!("give either --suite or both --labels and --instances"),
        }
    }
}

#[derive(Args)]
struct CatalogArg {
    /// Class table, `id<TAB>name<TAB>thing|stuff` per line. Defaults to the
    /// standard catalog (ground, wall, sky, car, person).
    #[arg(long)]
    catalog: Option<PathBuf>,
}

impl CatalogArg {
    fn load(&self) -> Result<ClassCatalog> {
        match &self.catalog {
            Some(p) => Ok(ClassCatalog::parse(&read_text(p)?)?),
            None => Ok(standard_catalog()),
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (`key=value`); may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Args)]
struct GenScene {
    /// Scene spec as JSON.
    #[arg(long, conflicts_with = "suite")]
    spec: Option<PathBuf>,
    /// Standard scene name instead of a spec file.
    #[arg(long)]
    suite: Option<String>,
    /// Replace the spec's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    catalog: CatalogArg,
    #[arg(long)]
    out_labels: PathBuf,
    #[arg(long)]
    out_instances: PathBuf,
    /// Also write the catalog in use.
    #[arg(long)]
    out_catalog: Option<PathBuf>,
}

#[derive(Args)]
struct ThomsonArgs {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output grid: k rows, 1 column, d channels.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    scene: SceneSource,
    #[command(flatten)]
    catalog: CatalogArg,
    #[command(flatten)]
    config: ConfigArgs,
    /// Replace `rng_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_fields: PathBuf,
    #[arg(long)]
    out_state: PathBuf,
    /// Loss curve CSV: step,seg,seg_mean,ins,ins_var,seed,total.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    fields: PathBuf,
    #[arg(long)]
    state: PathBuf,
    #[command(flatten)]
    catalog: CatalogArg,
    #[command(flatten)]
    config: ConfigArgs,
    /// Panoptic raster; segments go to `<out>.segments`, seed scores to `<out>.scores`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted panoptic map (with its `.segments` table).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth panoptic map.
    #[arg(long, conflicts_with = "gt_labels")]
    gt: Option<PathBuf>,
    /// Ground truth as a label raster (with --gt-instances).
    #[arg(long, requires = "gt_instances")]
    gt_labels: Option<PathBuf>,
    #[arg(long, requires = "gt_labels")]
    gt_instances: Option<PathBuf>,
    #[command(flatten)]
    catalog: CatalogArg,
    /// Comma-separated subset of pq,pqd,pc,miou,ap.
    #[arg(long, default_value = "pq,pqd,pc,miou,ap", value_delimiter = ',')]
    metrics: Vec<String>,
    /// Segment scores (`segment_id<TAB>score`) for AP; unscored segments score 1.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    fields: PathBuf,
    #[arg(long)]
    state: PathBuf,
    #[command(flatten)]
    scene: SceneSource,
    #[command(flatten)]
    catalog: CatalogArg,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "1,2,4,8", value_delimiter = ',')]
    factors: Vec<usize>,
    /// Timed runs per factor; the median is reported.
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated terms; all when omitted.
    #[arg(long, value_delimiter = ',')]
    terms: Vec<String>,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    fields: PathBuf,
    /// Writes `<prefix>_<group>.ppm`, one per three embedding channels.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    /// Target pixel `row,col` for a distance heatmap.
    #[arg(long, requires = "distance_out", value_name = "ROW,COL")]
    target: Option<String>,
    #[arg(long, requires = "target")]
    distance_out: Option<PathBuf>,
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn gen_scene(a: GenScene) -> Result<()> {
    let catalog = a.catalog.load()?;
    let mut spec: SceneSpec = match (&a.spec, &a.suite) {
        (Some(p), _) => serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        (None, Some(name)) => suite_scene(name).with_context(|| format!("no standard scene named {name:?}"))?,
        (None, None) => bail!("give --spec or --suite"),
    };
    if let Some(s) = a.seed {
        spec.rng_seed = s;
    }
    let scene = generate(&spec, &catalog)?;
    format::write_labels(&a.out_labels, &scene.labels)?;
    format::write_instances(&a.out_instances, &scene.instances)?;
    if let Some(p) = a.out_catalog {
        std::fs::write(p, catalog.to_text())?;
    }
    Ok(())
}

fn thomson(a: ThomsonArgs) -> Result<()> {
    let cfg = ThomsonConfig { steps: a.steps, step_size: a.step_size, rng_seed: a.seed, ..ThomsonConfig::new(a.k, a.d) };
    let (points, trace) = thomson_run(&cfg)?;
    let grid = FieldGrid::new(a.k, 1, a.d, points.concat())?;
    format::write_field(&a.out, &grid)?;
    let (lo, hi) = dot_range(&points);
    println!("energy\t{}", trace.last().copied().unwrap_or(0.0));
    println!("min_dot\t{lo}");
    println!("max_dot\t{hi}");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let catalog = a.catalog.load()?;
    let scene = a.scene.load(&catalog)?;
    let mut run = a.config.load()?;
    if let Some(s) = a.seed {
        run.train.rng_seed = s;
    }
    let start = Instant::now();
    let out = train(&scene, &catalog, &run.train)?;
    format::write_pixel_fields(&a.out_fields, &out.fields)?;
    format::write_state(&a.out_state, &out.state)?;
    if let Some(p) = a.curve {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&p)?);
        writeln!(f, "step,seg,seg_mean,ins,ins_var,seed,total")?;
        for (i, r) in out.curve.iter().enumerate() {
            writeln!(f, "{i},{},{},{},{},{},{}", r.seg, r.seg_mean, r.ins, r.ins_var, r.seed, r.total)?;
        }
        f.flush()?;
    }
    let pq = evaluate_toy(&out.fields, &out.state, &scene, &catalog, &run.decoder)?;
    let (first, last) = (out.curve[0].total, out.curve[out.curve.len() - 1].total);
    eprintln!(
        "{} steps in {:.1}s, loss {first:.4} -> {last:.4}, PQ {:.4}",
        run.train.steps,
        start.elapsed().as_secs_f64(),
        pq.pq
    );
    Ok(())
}

fn load_model(fields: &Path, state: &Path) -> Result<(PixelFields, SemanticState)> {
    Ok((format::read_pixel_fields(fields)?, format::read_state(state)?))
}

fn scores_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".scores");
    s.into()
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let catalog = a.catalog.load()?;
    let run = a.config.load()?;
    let (fields, state) = load_model(&a.fields, &a.state)?;
    let decoded = decode(&fields, &state, &catalog, &run.decoder)?;
    format::write_panoptic(&a.out, &decoded.map)?;
    let mut text = String::new();
    for (id, s) in &decoded.scores {
        text.push_str(&format!("{id}\t{s}\n"));
    }
    std::fs::write(scores_path(&a.out), text)?;
    Ok(())
}

fn parse_scores(text: &str) -> Result<Vec<(u32, f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, s) = line.split_once('\t').with_context(|| format!("scores line {}: expected two columns", n + 1))?;
        out.push((id.parse()?, s.parse()?));
    }
    Ok(out)
}

fn print_class_table(out: &mut impl Write, catalog: &ClassCatalog, r: &PqResult) -> Result<()> {
    writeln!(out, "class_id\tname\tkind\tpq\tsq\trq\ttp\tfp\tfn")?;
    for c in &r.per_class {
        let name = catalog.classes().iter().find(|i| i.id == c.class_id).map_or("?", |i| i.name.as_str());
        let kind = if c.is_thing { "thing" } else { "stuff" };
        let sq = if c.tp > 0 { c.iou_sum / c.tp as f64 } else { 0.0 };
        let rq = c.tp as f64 / (c.tp as f64 + 0.5 * (c.fp + c.fn_) as f64);
        writeln!(out, "{}\t{name}\t{kind}\t{}\t{sq}\t{rq}\t{}\t{}\t{}", c.class_id, c.pq, c.tp, c.fp, c.fn_)?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let catalog = a.catalog.load()?;
    let pred = format::read_panoptic(&a.pred)?;
    let gt = match (&a.gt, &a.gt_labels, &a.gt_instances) {
        (Some(p), _, _) => format::read_panoptic(p)?,
        (None, Some(l), Some(i)) => {
            PanopticMap::from_ground_truth(&format::read_labels(l)?, &format::read_instances(i)?, &catalog)?
        }
        _ => bail!("give --gt or both --gt-labels and --gt-instances"),
    };
    let mut stdout = std::io::stdout().lock();
    let mut table = None;
    for m in &a.metrics {
        match m.as_str() {
            "pq" => {
                let r = panoptic_quality(&pred, &gt, &catalog)?;
                writeln!(stdout, "pq\t{}\npq_things\t{}\npq_stuff\t{}", r.pq, r.pq_things, r.pq_stuff)?;
                table = Some(r);
            }
            "pqd" => writeln!(stdout, "pq_dagger\t{}", pq_dagger(&pred, &gt, &catalog)?.pq)?,
            "pc" => {
                let r = parsing_covering(&pred, &gt, &catalog)?;
                if r.undefined {
                    writeln!(stdout, "pc\tundefined")?;
                } else {
                    writeln!(stdout, "pc\t{}", r.pc)?;
                }
            }
            "miou" => writeln!(stdout, "miou\t{}", mean_iou(&pred.semantic(), &gt.semantic(), &catalog)?)?,
            "ap" => {
                let scores = match &a.scores {
                    Some(p) => parse_scores(&read_text(p)?)?,
                    None => Vec::new(),
                };
                let preds = thing_masks(&pred, &catalog, &scores);
                let gts = thing_masks(&gt, &catalog, &[]);
                writeln!(stdout, "ap\t{}", average_precision(&preds, &gts, &coco_thresholds()))?;
                writeln!(stdout, "ap50\t{}", average_precision(&preds, &gts, &[0.5]))?;
            }
            other => bail!("unknown metric {other:?}; expected pq, pqd, pc, miou or ap"),
        }
    }
    if let Some(r) = table {
        writeln!(stdout)?;
        print_class_table(&mut stdout, &catalog, &r)?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    if a.runs < 5 {
        bail!("--runs must be at least 5");
    }
    let catalog = a.catalog.load()?;
    let scene = a.scene.load(&catalog)?;
    let gt = PanopticMap::from_ground_truth(&scene.labels, &scene.instances, &catalog)?;
    let run = a.config.load()?;
    let (fields, state) = load_model(&a.fields, &a.state)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "factor,ms,pq")?;
    for &factor in &a.factors {
        let cfg = DecoderConfig { downsample_factor: factor, ..run.decoder };
        let mut times = Vec::with_capacity(a.runs);
        let mut last = None;
        for _ in 0..a.runs {
            let t = Instant::now();
            let d = decode(&fields, &state, &catalog, &cfg)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            last = Some(d);
        }
        let pq = panoptic_quality(&last.expect("runs >= 5").map, &gt, &catalog)?.pq;
        writeln!(stdout, "{factor},{:.3},{pq}", median(times))?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let terms: Vec<GradTerm> = if a.terms.is_empty() {
        GradTerm::ALL.to_vec()
    } else {
        a.terms.iter().map(|t| GradTerm::parse(t)).collect::<hle_core::Result<_>>()?
    };
    let cfg = GradCheckConfig { points: a.points, seed: a.seed, ..Default::default() };
    let mut failed = Vec::new();
    println!("term\tpoints\tcoordinates\trejected\tmax_rel_error\tresult");
    for t in terms {
        let r = check_term(t, &cfg)?;
        let ok = r.max_rel_error < a.tolerance;
        println!(
            "{}\t{}\t{}\t{}\t{:.3e}\t{}",
            t.name(),
            r.points,
            r.coordinates,
            r.rejected,
            r.max_rel_error,
            if ok { "pass" } else { "fail" }
        );
        if !ok {
            failed.push(t.name());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn viz_cmd(a: VizArgs) -> Result<()> {
    let fields = format::read_pixel_fields(&a.fields)?;
    if a.out_prefix.is_none() && a.distance_out.is_none() {
        bail!("nothing to do: give --out-prefix and/or --target with --distance-out");
    }
    let (h, w) = (fields.height(), fields.width());
    if let Some(prefix) = &a.out_prefix {
        for (g, img) in viz::embedding_images(&fields.embedding).iter().enumerate() {
            let mut name = prefix.as_os_str().to_owned();
            name.push(format!("_{g}.ppm"));
            viz::write_ppm(Path::new(&name), w, h, img)?;
        }
    }
    if let Some(out) = &a.distance_out {
        let target = a.target.as_deref().unwrap_or_default();
        let (r, c) = target.split_once(',').with_context(|| format!("--target {target:?} is not ROW,COL"))?;
        let img = viz::distance_image(&fields, r.trim().parse()?, c.trim().parse()?)?;
        viz::write_ppm(out, w, h, &img)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenScene(a) => gen_scene(a),
        Cmd::Thomson(a) => thomson(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Decode(a) => decode_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::BenchDownsample(a) => bench_cmd(a),
        Cmd::Gradcheck(a) => gradcheck_cmd(a),
        Cmd::Viz(a) => viz_cmd(a),
    }
}
