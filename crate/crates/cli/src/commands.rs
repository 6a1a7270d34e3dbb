use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use attentropy::entropy::{self, EntropyMap};
use attentropy::eval::{self, EvalConfig};
use attentropy::pipeline::{self, ExtractConfig};
use attentropy::selection::{self, AutoSelectOptions, FitOptions, TestPatternConfig};
use attentropy::{npy, pgm, viz, ExtractOptions, LayerAggregation, ScoreMap, VitConfig, VitWeights};
use serde::Serialize;

use crate::config::{self, PipelineConfig};
use crate::{
    CliError, EvaluateArgs, ExportVizArgs, ExtractArgs, FitWeightsArgs, GenTestpatternArgs, InitModelArgs, SegmentArgs,
    SelectLayersArgs, ValidateVizArgs,
};

pub struct Context {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub config: PipelineConfig,
}

impl Context {
    fn out_dir(&self, command: &str) -> Result<&Path, CliError> {
        let dir = self
            .out
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("{command} needs --out <DIR>")))?;
        fs::create_dir_all(dir)?;
        Ok(dir)
    }

    fn model_path<'a>(&'a self, flag: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        flag.as_deref()
            .or(self.config.model.as_deref())
            .ok_or_else(|| CliError::Config("no model given (--model or config.model)".into()))
    }

    fn extract_options(&self, no_renormalize: bool) -> ExtractOptions {
        ExtractOptions {
            renormalize: !no_renormalize && self.config.renormalize.unwrap_or(true),
        }
    }

    /// Writes JSON to `--out` when given, otherwise to stdout.
    fn emit_json<T: Serialize>(&self, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        match &self.out {
            Some(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                fs::write(path, text)?;
            }
            None => std::io::stdout().write_all(text.as_bytes())?,
        }
        Ok(())
    }
}

fn load_model(path: &Path) -> Result<VitWeights, CliError> {
    Ok(VitWeights::load(path)?)
}

pub fn init_model(ctx: &Context, args: InitModelArgs) -> Result<(), CliError> {
    let config = VitConfig {
        patch_size: args.patch,
        grid_n: args.grid,
        channels: args.channels,
        heads: args.heads,
        layers: args.layers,
        use_class_token: args.class_token,
    };
    config.validate()?;
    let dir = ctx.out_dir("init-model")?;
    let mut weights = attentropy::init_model(&config, ctx.seed)?;
    if args.zero_qk {
        weights.zero_query_key();
    }
    weights.save(dir)?;
    println!(
        "model: {} layers, {} heads, C={}, {}x{} patches of {}px -> {}",
        config.layers,
        config.heads,
        config.channels,
        config.grid_n,
        config.grid_n,
        config.patch_size,
        dir.display()
    );
    Ok(())
}

pub fn gen_testpattern(ctx: &Context, args: GenTestpatternArgs) -> Result<(), CliError> {
    let (width, height, patch) = match args.model.as_deref().or(ctx.config.model.as_deref()) {
        Some(path) => {
            let c = load_model(path)?.config;
            (c.input_size(), c.input_size(), c.patch_size)
        }
        None => (args.width, args.height, args.patch),
    };
    let mut cfg = TestPatternConfig::for_input(width, height, patch, ctx.seed);
    if let Some(r) = args.radius {
        cfg.radius = r;
    }
    let pattern = selection::gen_test_pattern(&cfg)?;
    let dir = ctx.out_dir("gen-testpattern")?;
    pgm::save_image(&pattern.image, dir.join("image.pgm"))?;
    pgm::save_mask(&pattern.object_mask, dir.join("mask.pgm"))?;
    println!(
        "test pattern {width}x{height}, circle r={} at ({}, {}) -> {}",
        cfg.radius,
        cfg.center_x,
        cfg.center_y,
        dir.display()
    );
    Ok(())
}

fn extract_config(ctx: &Context, stride: Option<usize>, no_renormalize: bool, keep_attention: bool) -> ExtractConfig {
    ExtractConfig {
        stride: stride.or(ctx.config.stride),
        options: ctx.extract_options(no_renormalize),
        keep_attention,
    }
}

pub fn extract(ctx: &Context, args: ExtractArgs) -> Result<(), CliError> {
    let model = load_model(ctx.model_path(&args.model)?)?;
    let image = pgm::load_image(&args.image)?;
    let cfg = extract_config(ctx, args.stride, args.no_renormalize, args.dump_attention);
    let extraction = pipeline::extract(&model, &image, &cfg)?;
    let dir = ctx.out_dir("extract")?;
    let manifest = pipeline::write_extraction(&extraction, dir)?;
    println!("{} windows, {} layers -> {}", manifest.windows.len(), manifest.layers.len(), dir.display());
    for layer in &manifest.layers {
        let (lo, hi) = extraction.maps[layer.index].min_max();
        println!("  layer {:2}  {}x{}  entropy [{lo:.4}, {hi:.4}]", layer.index, layer.grid_w, layer.grid_h);
    }
    Ok(())
}

#[derive(Serialize)]
struct SelectionOutput<'a> {
    ratio: f64,
    seed: u64,
    #[serde(flatten)]
    report: &'a selection::SelectionReport,
    aggregation: LayerAggregation,
}

pub fn select_layers(ctx: &Context, args: SelectLayersArgs) -> Result<(), CliError> {
    let model = load_model(ctx.model_path(&args.model)?)?;
    let options = AutoSelectOptions {
        ratio: args.ratio,
        radius: args.radius,
        seed: ctx.seed,
        extract: ctx.extract_options(args.no_renormalize),
    };
    let report = selection::auto_select(&model, &options)?;
    if ctx.out.is_some() {
        for e in &report.per_layer {
            let ratio = e.ratio.map_or_else(|| "-".to_string(), |r| format!("{r:.3}"));
            let mark = if e.selected { "*" } else { " " };
            println!("{mark} layer {:2}  obj {:.4}  bg {:.4}  bg/obj {ratio}", e.layer, e.obj_mean, e.bg_mean);
        }
    }
    ctx.emit_json(&SelectionOutput {
        ratio: args.ratio,
        seed: ctx.seed,
        aggregation: report.aggregation(),
        report: &report,
    })
}

#[derive(Serialize)]
struct FitOutput {
    weights: Vec<f64>,
    bias: f64,
    aggregation: LayerAggregation,
    frames: usize,
    samples: usize,
    epochs: usize,
    learning_rate: f64,
    l2: f64,
    training_ap: f64,
    loss_trace: Vec<f64>,
}

pub fn fit_weights(ctx: &Context, args: FitWeightsArgs) -> Result<(), CliError> {
    if args.entropy_dirs.is_empty() {
        return Err(CliError::Config("fit-weights needs at least one --entropy-dir/--mask pair".into()));
    }
    if args.entropy_dirs.len() != args.masks.len() {
        return Err(CliError::Config(format!(
            "{} entropy dirs but {} masks",
            args.entropy_dirs.len(),
            args.masks.len()
        )));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut layers = None;
    for (dir, mask_path) in args.entropy_dirs.iter().zip(&args.masks) {
        let (manifest, maps) = pipeline::read_entropy_dir(dir)?;
        let mask = pgm::load_mask(mask_path)?;
        if (mask.width(), mask.height()) != (manifest.image_width, manifest.image_height) {
            return Err(CliError::Config(format!(
                "{} is {}x{} but {} was extracted from a {}x{} image",
                mask_path.display(),
                mask.width(),
                mask.height(),
                dir.display(),
                manifest.image_width,
                manifest.image_height
            )));
        }
        if *layers.get_or_insert(maps.len()) != maps.len() {
            return Err(CliError::Config(format!("{}: layer count differs from earlier frames", dir.display())));
        }
        let (x, y) = pipeline::pixel_features(&maps, &mask)?;
        features.extend_from_slice(x.as_slice());
        labels.extend(y);
    }
    let samples = attentropy::Matrix::from_vec(labels.len(), layers.unwrap_or(0), features);
    let options = FitOptions {
        epochs: args.epochs,
        learning_rate: args.lr,
        l2: args.l2,
    };
    let fit = selection::fit_layer_weights(&samples, &labels, &options)?;
    let pairs = samples.iter_rows().zip(&labels).map(|(x, &y)| (fit.predict(x), y)).collect();
    let training_ap = eval::average_precision(&eval::pr_curve_from_pairs(pairs)?)?;
    if ctx.out.is_some() {
        println!(
            "fitted {} weights on {} pixels: loss {:.5} -> {:.5}, training AP {training_ap:.4}",
            fit.weights.len(),
            labels.len(),
            fit.loss_trace[0],
            fit.loss_trace[fit.loss_trace.len() - 1]
        );
    }
    ctx.emit_json(&FitOutput {
        aggregation: fit.aggregation(),
        weights: fit.weights,
        bias: fit.bias,
        frames: args.entropy_dirs.len(),
        samples: labels.len(),
        epochs: options.epochs,
        learning_rate: options.learning_rate,
        l2: options.l2,
        training_ap,
        loss_trace: fit.loss_trace,
    })
}

#[derive(Serialize)]
struct SegmentOutput {
    width: usize,
    height: usize,
    threshold: f64,
    aggregation: LayerAggregation,
    common_grid: (usize, usize),
    object_pixels: usize,
    scores: &'static str,
    mask: &'static str,
}

pub fn segment(ctx: &Context, args: SegmentArgs) -> Result<(), CliError> {
    let threshold = args
        .threshold
        .or(ctx.config.threshold)
        .ok_or_else(|| CliError::Config("no threshold given (--threshold or config.threshold)".into()))?;
    let (maps, width, height): (Vec<EntropyMap>, usize, usize) = match &args.entropy_dir {
        Some(dir) => {
            let (manifest, maps) = pipeline::read_entropy_dir(dir)?;
            (maps, manifest.image_width, manifest.image_height)
        }
        None => {
            let image_path = args
                .image
                .as_deref()
                .ok_or_else(|| CliError::Config("segment needs --image with --model, or --entropy-dir".into()))?;
            let model = load_model(ctx.model_path(&args.model)?)?;
            let image = pgm::load_image(image_path)?;
            let cfg = extract_config(ctx, args.stride, args.no_renormalize, false);
            let extraction = pipeline::extract(&model, &image, &cfg)?;
            (extraction.maps, image.width(), image.height())
        }
    };
    let aggregation = match (&args.layers, &args.aggregation) {
        (Some(spec), _) => config::parse_layers(spec)?,
        (None, Some(path)) => config::load_aggregation(path)?,
        (None, None) => match (&ctx.config.aggregation, &ctx.config.aggregation_file) {
            (Some(a), _) => a.clone(),
            (None, Some(path)) => config::load_aggregation(path)?,
            (None, None) => LayerAggregation::all_layers(maps.len()),
        },
    };
    let common = args
        .common
        .or(ctx.config.common_grid.map(|[w, h]| (w, h)))
        .or_else(|| entropy::finest_grid(&maps))
        .ok_or_else(|| CliError::Config("no layers to segment with".into()))?;
    let scores: ScoreMap = entropy::score_map(&maps, &aggregation, Some(common), width, height)?;
    let mask = entropy::binarize(&scores, threshold)?;
    let dir = ctx.out_dir("segment")?;
    npy::save_tensor(&scores.to_tensor()?, dir.join("scores.npy"))?;
    pgm::save_mask(&mask, dir.join("mask.pgm"))?;
    let summary = SegmentOutput {
        width,
        height,
        threshold,
        aggregation,
        common_grid: common,
        object_pixels: mask.count(attentropy::MaskLabel::Object),
        scores: "scores.npy",
        mask: "mask.pgm",
    };
    fs::write(dir.join("segment.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "{} of {} pixels at or above {threshold} -> {}",
        summary.object_pixels,
        width * height,
        dir.display()
    );
    Ok(())
}

/// Files in `dir` with extension `ext`, keyed by stem.
fn files_by_stem(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

pub fn evaluate(ctx: &Context, args: EvaluateArgs) -> Result<(), CliError> {
    let scores = files_by_stem(&args.scores, "npy")?;
    let gts = files_by_stem(&args.gt, "pgm")?;
    let unmatched: Vec<&str> = scores
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !scores.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(CliError::Config(format!("unmatched score/gt files: {}", unmatched.join(", "))));
    }
    if scores.is_empty() {
        return Err(CliError::Config(format!("no .npy score maps in {}", args.scores.display())));
    }
    let mut frames = Vec::with_capacity(scores.len());
    for (stem, path) in &scores {
        let s = ScoreMap::from_tensor(&npy::load_tensor(path)?)?;
        let g = pgm::load_mask(&gts[stem])?;
        if (s.width(), s.height()) != (g.width(), g.height()) {
            return Err(CliError::Config(format!(
                "{stem}: score map is {}x{} but mask is {}x{}",
                s.width(),
                s.height(),
                g.width(),
                g.height()
            )));
        }
        frames.push((s, g));
    }
    let config = EvalConfig {
        thresholds: args
            .thresholds
            .or_else(|| ctx.config.thresholds.clone())
            .unwrap_or_else(eval::default_thresholds),
        match_threshold: args.match_threshold,
        tpr_target: args.tpr_target,
        normalization: args.normalization.into(),
    };
    let report = eval::evaluate(&frames, &config)?;
    if let Some(csv) = &args.csv {
        let fresh = !csv.exists();
        let mut file = fs::OpenOptions::new().create(true).append(true).open(csv)?;
        if fresh {
            writeln!(file, "{}", attentropy::MetricsReport::csv_header())?;
        }
        writeln!(file, "{}", report.csv_row())?;
    }
    if ctx.out.is_some() {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        println!("frames  {}", report.frames);
        println!("AP      {:.4}", report.ap);
        println!("FPR95   {:.4}", report.fpr95);
        println!("sIoU    {}", opt(report.siou_bar));
        println!("PPV     {}", opt(report.ppv_bar));
        println!("F1      {}", opt(report.f1_bar));
    }
    ctx.emit_json(&report)
}

pub fn export_viz(ctx: &Context, args: ExportVizArgs) -> Result<(), CliError> {
    let manifest = pipeline::read_manifest(&args.attention)?;
    if manifest.layers.iter().any(|l| l.attention.is_empty()) {
        return Err(CliError::Config(format!(
            "{} has no attention dumps; rerun extract with --dump-attention",
            args.attention.display()
        )));
    }
    let (x, y) = *manifest.windows.get(args.window).ok_or_else(|| {
        CliError::Config(format!("window {} out of range ({} windows)", args.window, manifest.windows.len()))
    })?;
    let stack = pipeline::read_attention_dir(&args.attention, args.window)?;
    let full = pgm::load_image(&args.image)?;
    if (full.width(), full.height()) != (manifest.image_width, manifest.image_height) {
        return Err(CliError::Config(format!(
            "image is {}x{} but the extraction was {}x{}",
            full.width(),
            full.height(),
            manifest.image_width,
            manifest.image_height
        )));
    }
    let side = stack.layers()[0].grid_n() * manifest.patch_size;
    let image = full.crop(x, y, side, side);
    let options = ExtractOptions {
        renormalize: manifest.renormalize,
    };
    let dir = ctx.out_dir("export-viz")?;
    let bundle = viz::export_viz(&image, &stack, options, dir)?;
    println!("{} layers, {} tokens -> {}", bundle.layers, bundle.tokens, dir.display());
    Ok(())
}

pub fn validate_viz(_ctx: &Context, args: ValidateVizArgs) -> Result<(), CliError> {
    let m = viz::validate_viz(&args.bundle)?;
    println!(
        "ok: {} layers, grid {}x{}, clip [{}, {}], image {}x{}",
        m.layers, m.grid_n, m.grid_n, m.clip[0], m.clip[1], m.image.width, m.image.height
    );
    Ok(())
}
