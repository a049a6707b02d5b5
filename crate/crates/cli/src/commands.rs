use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use aerokit::dataio::{self, ClipRecord, DataError};
use aerokit::metrics::{
    clip_features, clip_targets, fit_ridge, flow_imu_correlation, select_lambda, AxisScores, FlowImuConfig, RidgeModel,
    LAMBDA_GRID,
};
use aerokit::probe::{self, ProbeConfig, ProbeError, ProbeExample, ProbeModel, ProbeTrainConfig};
use aerokit::pseudovae::{self, EncoderConfig};
use aerokit::quantizer::{self, AxisRanges};
use aerokit::synthworld::SynthConfig;
use aerokit::trainer::{self, GenConfig, GenExample, GenModel};
use aerokit::{fingerprint, NUM_AXES, TOOL_VERSION};
use serde::{Deserialize, Serialize};

use crate::{
    Command, EvalArgs, FlowImuEvalArgs, FlowImuFitArgs, GenEvalArgs, GenTrainArgs, ProbeEvalArgs, ProbeTrainArgs,
    ReportArgs, SynthGenArgs,
};

/// A failure with a stable, machine-readable category.
#[derive(Debug)]
pub struct CliError {
    category: &'static str,
    message: String,
}

impl CliError {
    fn new(category: &'static str, message: impl Display) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }

    fn missing(path: &Path) -> Self {
        Self::new("missing_artifact", format!("{} does not exist", path.display()))
    }

    pub fn category(&self) -> &'static str {
        self.category
    }

    pub fn message(&self) -> &str {
        &self.message
    }

    pub fn exit_code(&self) -> u8 {
        if self.category == "usage" {
            2
        } else {
            1
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(e: impl Display) -> CliError {
    CliError::new("invalid_input", e)
}

fn runtime(e: impl Display) -> CliError {
    CliError::new("runtime", e)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::new("io", format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("schema", format!("{what} {}: {e}", path.display())))
}

fn load_records(dir: &Path) -> Result<Vec<ClipRecord>> {
    require(dir)?;
    let recs = dataio::load_dataset(dir).map_err(|e| match e {
        DataError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            CliError::new("missing_artifact", e)
        }
        other => invalid(other),
    })?;
    if recs.is_empty() {
        return Err(invalid(format!("no clip directories under {}", dir.display())));
    }
    Ok(recs)
}

fn load_probe(path: &Path) -> Result<(ProbeModel, EncoderConfig)> {
    require(path)?;
    let model = ProbeModel::load(path).map_err(invalid)?;
    let enc = model
        .meta
        .encoder
        .clone()
        .ok_or_else(|| invalid(format!("{} carries no encoder statistics", path.display())))?;
    Ok((model, enc))
}

fn load_ranges(path: &Path) -> Result<AxisRanges> {
    require(path)?;
    quantizer::read_ranges(path).map_err(invalid)
}

/// Split sorted records into (train, validation), validation last.
fn split(recs: Vec<ClipRecord>, val_frac: f64) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    if !(0.0..1.0).contains(&val_frac) || val_frac == 0.0 {
        return Err(CliError::new("usage", format!("--val-frac must be in (0, 1), got {val_frac}")));
    }
    let n = recs.len();
    if n < 2 {
        return Err(invalid("need at least 2 clips to split"));
    }
    let n_val = ((n as f64 * val_frac).round() as usize).clamp(1, n - 1);
    let mut train = recs;
    let val = train.split_off(n - n_val);
    Ok((train, val))
}

fn encode_all(recs: &[ClipRecord], enc: &EncoderConfig) -> Result<Vec<GenExample>> {
    aerokit::par::map_slice(recs, |r| -> Result<GenExample> {
        let latent = pseudovae::encode(&r.clip, enc).map_err(invalid)?;
        let actions = r.actions().map_err(invalid)?;
        Ok(GenExample {
            id: r.id.clone(),
            latent,
            actions,
        })
    })
    .into_iter()
    .collect()
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthGen(a) => synth_gen(a),
        Command::ProbeTrain(a) => probe_train(a),
        Command::ProbeEval(a) => probe_eval(a),
        Command::Eval(a) => eval(a),
        Command::FlowImuFit(a) => flow_imu_fit(a),
        Command::FlowImuEval(a) => flow_imu_eval(a),
        Command::GenTrain(a) => gen_train(a),
        Command::GenEval(a) => gen_eval(a),
        Command::Report(a) => report(a),
    }
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    kind: &'static str,
    tool_version: &'static str,
    seed: u64,
    config_fingerprint: String,
    config: &'a SynthConfig,
    clip_ids: Vec<String>,
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        clips: a.clips,
        frames: a.frames,
        width: a.width,
        height: a.height,
        ..Default::default()
    };
    if a.out.exists() && fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(invalid(format!("{} exists and is not empty", a.out.display())));
    }
    let clips = cfg.write_dataset(&a.out).map_err(runtime)?;
    write_json(
        &a.out.join("dataset.json"),
        &DatasetManifest {
            kind: "synth-dataset",
            tool_version: TOOL_VERSION,
            seed: cfg.seed,
            config_fingerprint: fingerprint(&cfg),
            config: &cfg,
            clip_ids: clips.iter().map(|c| c.id.clone()).collect(),
        },
    )?;
    log::info!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn probe_train(a: ProbeTrainArgs) -> Result<()> {
    let (train, val) = split(load_records(&a.data)?, a.val_frac)?;
    let ranges = if a.ranges.exists() {
        load_ranges(&a.ranges)?
    } else {
        let acts = train
            .iter()
            .map(|r| r.actions().map_err(invalid).and_then(|s| quantizer::causal_shift(&s).map_err(invalid)))
            .collect::<Result<Vec<_>>>()?;
        let r = quantizer::fit_ranges(&acts, quantizer::DEFAULT_PERCENTILE, quantizer::DEFAULT_BINS).map_err(invalid)?;
        quantizer::write_ranges(&a.ranges, &r).map_err(|e| CliError::new("io", e))?;
        log::info!("fitted ranges written to {}", a.ranges.display());
        r
    };
    let clips: Vec<_> = train.iter().map(|r| &r.clip).collect();
    let enc = pseudovae::fit_stats(&clips, &EncoderConfig::default()).map_err(invalid)?;
    let tr = probe::make_examples(&train, &enc, &ranges).map_err(invalid)?;
    let va = probe::make_examples(&val, &enc, &ranges).map_err(invalid)?;
    log::info!("training probe on {} clips, validating on {}", tr.len(), va.len());
    let cfg = ProbeConfig {
        separate_trunks: a.separate_trunks,
        seed: a.seed,
        ..Default::default()
    };
    let tcfg = ProbeTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        weight_decay: a.weight_decay,
        seed: a.seed,
    };
    let (mut model, stats) = probe::train_probe(&tr, &va, &cfg, &tcfg).map_err(|e| match e {
        ProbeError::Config(_) => CliError::new("usage", e),
        other => runtime(other),
    })?;
    model.meta.encoder = Some(enc);
    model.meta.ranges_fingerprint = Some(fingerprint(&quantizer::render_ranges(&ranges)));
    model.save(&a.out).map_err(|e| CliError::new("io", e))?;
    if let Some(log_path) = &a.log {
        let mut csv = String::from("epoch,train_loss,val_mean");
        for name in aerokit::AXIS_NAMES {
            csv.push_str(&format!(",val_{name}"));
        }
        csv.push('\n');
        for s in &stats {
            csv.push_str(&format!("{},{},{}", s.epoch, s.train_loss, s.val_accuracy.mean));
            for v in s.val_accuracy.per_axis {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        write_text(log_path, &csv)?;
    }
    log::info!(
        "best epoch {} with validation accuracy {:.4}",
        model.meta.best_epoch,
        model.meta.best_val_accuracy
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct ProbeEvalOutput {
    pub kind: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub clip_ids: Vec<String>,
    pub accuracy: AxisScores,
    pub majority: AxisScores,
    pub random: f64,
}

fn probe_eval(a: ProbeEvalArgs) -> Result<()> {
    let (model, enc) = load_probe(&a.ckpt)?;
    let ranges = load_ranges(&a.ranges)?;
    let mut recs = load_records(&a.data)?;
    if let Some(f) = a.val_frac {
        recs = split(recs, f)?.1;
    }
    let examples = probe::make_examples(&recs, &enc, &ranges).map_err(invalid)?;
    let accuracy = probe::probe_accuracy(&model, &examples).map_err(runtime)?;
    let labels: Vec<_> = examples.iter().map(|e: &ProbeExample| &e.labels).collect();
    let majority = probe::majority_baseline(&labels, model.config.bins).map_err(runtime)?;
    let out = ProbeEvalOutput {
        kind: "probe-eval".into(),
        tool_version: TOOL_VERSION.into(),
        seed: model.meta.train_seed,
        config_fingerprint: fingerprint(&model.config),
        clip_ids: recs.iter().map(|r| r.id.clone()).collect(),
        accuracy,
        majority,
        random: 1.0 / model.config.bins as f64,
    };
    println!("axis  probe   majority  random");
    for (j, name) in aerokit::AXIS_NAMES.iter().enumerate() {
        println!(
            "{name:<4}  {:.4}  {:.4}    {:.4}",
            accuracy.per_axis[j], majority.per_axis[j], out.random
        );
    }
    println!("mean  {:.4}  {:.4}    {:.4}", accuracy.mean, majority.mean, out.random);
    if let Some(path) = &a.out {
        write_json(path, &out)?;
    }
    Ok(())
}

/// Saved Flow-IMU evaluator.
#[derive(Serialize, Deserialize)]
pub struct FlowImuArtifact {
    pub kind: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub config: FlowImuConfig,
    pub auto_lambda: bool,
    pub clip_ids: Vec<String>,
    pub model: RidgeModel,
}

type Rows = (Vec<Vec<f64>>, Vec<[f64; NUM_AXES]>, Vec<usize>);

fn flow_rows(recs: &[ClipRecord], cfg: &FlowImuConfig) -> Result<Rows> {
    let per_clip = aerokit::par::map_slice(recs, |r| -> Result<(Vec<Vec<f64>>, Vec<[f64; NUM_AXES]>)> {
        let f = clip_features(&r.clip, cfg).map_err(invalid)?;
        let t = clip_targets(&r.actions().map_err(invalid)?);
        Ok((f, t))
    });
    let (mut x, mut y, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for (i, item) in per_clip.into_iter().enumerate() {
        let (f, t) = item?;
        g.extend(std::iter::repeat(i).take(f.len()));
        x.extend(f);
        y.extend(t);
    }
    Ok((x, y, g))
}

fn flow_imu_fit(a: FlowImuFitArgs) -> Result<()> {
    let recs = load_records(&a.data)?;
    let cfg = FlowImuConfig {
        temporal_context: !a.no_temporal_context,
        ..Default::default()
    };
    let (x, y, groups) = flow_rows(&recs, &cfg)?;
    let lambda = if a.auto_lambda {
        let l = select_lambda(&x, &y, &groups, 5, &LAMBDA_GRID).map_err(runtime)?;
        log::info!("cross-validated lambda = {l}");
        l
    } else {
        a.lambda
    };
    let model = fit_ridge(&x, &y, lambda).map_err(runtime)?;
    let art = FlowImuArtifact {
        kind: "flow-imu".into(),
        tool_version: TOOL_VERSION.into(),
        seed: a.seed,
        config_fingerprint: fingerprint(&(cfg, lambda)),
        config: cfg,
        auto_lambda: a.auto_lambda,
        clip_ids: recs.iter().map(|r| r.id.clone()).collect(),
        model,
    };
    write_json(&a.out, &art)
}

#[derive(Serialize, Deserialize)]
pub struct FlowImuEvalOutput {
    pub kind: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub shuffle_pairs: Option<u64>,
    pub clip_ids: Vec<String>,
    pub r: AxisScores,
}

fn load_flow_model(path: &Path) -> Result<FlowImuArtifact> {
    let art: FlowImuArtifact = read_json(path, "flow-imu model")?;
    if art.kind != "flow-imu" {
        return Err(CliError::new("schema", format!("{}: kind `{}` is not flow-imu", path.display(), art.kind)));
    }
    art.model.validate().map_err(|e| CliError::new("schema", e))?;
    Ok(art)
}

fn flow_imu_eval(a: FlowImuEvalArgs) -> Result<()> {
    let art = load_flow_model(&a.model)?;
    let recs = load_records(&a.data)?;
    let (x, mut y, _) = flow_rows(&recs, &art.config)?;
    if let Some(seed) = a.shuffle_pairs {
        let order = aerokit::permutation(y.len(), seed);
        y = order.iter().map(|&i| y[i]).collect();
    }
    let r = flow_imu_correlation(&art.model, &x, &y).map_err(runtime)?;
    log::info!("flow-imu mean r = {:.4}", r.mean);
    write_json(
        &a.out,
        &FlowImuEvalOutput {
            kind: "flow-imu-eval".into(),
            tool_version: TOOL_VERSION.into(),
            seed: art.seed,
            config_fingerprint: art.config_fingerprint.clone(),
            shuffle_pairs: a.shuffle_pairs,
            clip_ids: recs.iter().map(|r| r.id.clone()).collect(),
            r,
        },
    )
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, enc) = load_probe(&a.probe)?;
    let ranges = load_ranges(&a.ranges)?;
    let mut recs = load_records(&a.data)?;
    if let Some(seed) = a.shuffle_frames {
        for (i, r) in recs.iter_mut().enumerate() {
            let order = aerokit::permutation(r.clip.num_frames(), seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
            r.clip = r.clip.reordered(&order).map_err(invalid)?;
        }
    }
    let flow = a.flow_imu.as_deref().map(load_flow_model).transpose()?;
    let examples = encode_all(&recs, &enc)?;
    let rollouts: Vec<_> = examples.into_iter().map(|e| (e.id, e.latent, e.actions)).collect();
    let fp = fingerprint(&(&model.config, &enc, quantizer::render_ranges(&ranges)));
    let mut report = trainer::eval_rollouts(&model, &ranges, &rollouts, &a.method, a.seed, &fp).map_err(runtime)?;
    if let Some(art) = flow {
        let (x, y, _) = flow_rows(&recs, &art.config)?;
        report.flow_imu_r = Some(flow_imu_correlation(&art.model, &x, &y).map_err(runtime)?);
    }
    dataio::write_report(&report, &a.out).map_err(runtime)?;
    log::info!("mean AAS {:.4}, mean PCR {:.4}", report.aas.mean, report.pcr.mean);
    Ok(())
}

fn gen_train(a: GenTrainArgs) -> Result<()> {
    let (model, enc) = load_probe(&a.probe)?;
    let ranges = load_ranges(&a.ranges)?;
    let recs = load_records(&a.data)?;
    let data = encode_all(&recs, &enc)?;
    let cfg = GenConfig {
        lambda_phys: a.lambda_phys,
        warmup_steps: a.warmup,
        total_steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        seed: a.seed,
        log_every: a.log_every,
        ..Default::default()
    };
    cfg.validate().map_err(|e| CliError::new("usage", e))?;
    let (gen, log_rows) = trainer::train_generator(&data, &model, &ranges, &cfg).map_err(runtime)?;
    gen.save(&a.out).map_err(|e| CliError::new("io", e))?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    trainer::write_log(&log_path, &log_rows).map_err(|e| CliError::new("io", e))?;
    if let Some(last) = log_rows.last() {
        log::info!("final l_rec {:.5}, l_probe {:.5}", last.l_rec, last.l_probe);
    }
    Ok(())
}

fn gen_eval(a: GenEvalArgs) -> Result<()> {
    require(&a.gen)?;
    let gen = GenModel::load(&a.gen).map_err(invalid)?;
    let (model, enc) = load_probe(&a.probe)?;
    let ranges = load_ranges(&a.ranges)?;
    let recs = load_records(&a.data)?;
    let data = encode_all(&recs, &enc)?;
    let method = a
        .method
        .unwrap_or_else(|| format!("gen-lambda{}", gen.config.lambda_phys));
    let report = trainer::eval_generator(&gen, &model, &ranges, &data, &method).map_err(runtime)?;
    dataio::write_report(&report, &a.out).map_err(runtime)?;
    log::info!("mean AAS {:.4}, mean PCR {:.4}", report.aas.mean, report.pcr.mean);
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(a.reports.len());
    for p in &a.reports {
        require(p)?;
        let text = fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
        let r = crate::table::parse_report(&text).map_err(|e| CliError::new("schema", format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let table = crate::table::Table::build(&reports).map_err(|e| CliError::new("schema", e))?;
    print!("{}", table.render_text());
    if let Some(csv) = &a.csv {
        write_text(csv, &table.render_csv())?;
    }
    Ok(())
}
