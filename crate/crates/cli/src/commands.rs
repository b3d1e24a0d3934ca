use std::fs;
use std::path::{Path, PathBuf};

use recdiff::data::{
    load_clip, load_clip_pair, load_frame, load_pairs, save_clip, save_frame, synthesize_toy_dataset, upsample_clip,
    LoadOptions, SampleManifest, Split,
};
use recdiff::frame::{ImageTensor, VideoClip};
use recdiff::inference::Enhancer;
use recdiff::metrics::{evaluate, Embedder, EvalItem, MetricsReport, PixelEmbedder, RandomProjectionEmbedder};
use recdiff::training::{ModelCheckpoint, RunOutput, Trainer};
use recdiff::{Error, Result};

use crate::config::{ImageEmbedderKind, Method, RunConfig};
use crate::report::{comparison_table, frame_grid};

pub const REPORT_NAME: &str = "report.toml";
pub const TABLE_NAME: &str = "table.md";
pub const GRID_NAME: &str = "grid.png";

fn require<'a, T>(value: &'a Option<T>, key: &str, hint: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::config(key, format!("not set; {hint}")))
}

fn clip_name(subject: &str, expression: &str) -> String {
    format!("{subject}-{expression}")
}

fn manifest(config: &RunConfig) -> Result<SampleManifest> {
    SampleManifest::load(require(&config.data.manifest, "data.manifest", "pass --manifest or run synth-data")?)
}

fn load_options(config: &RunConfig) -> LoadOptions {
    LoadOptions {
        low_res: config.model.low_res,
        frames: config.data.standardize_frames,
    }
}

fn has_frames(dir: &Path) -> Result<bool> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            return Ok(true);
        }
    }
    Ok(false)
}

pub fn synth_data(config: &RunConfig) -> Result<()> {
    let m = synthesize_toy_dataset(&config.synth(), &config.output_dir)?;
    let train = m.split(Split::Train).count();
    println!(
        "wrote {} clips ({} train, {} test) to {}",
        m.records.len(),
        train,
        m.records.len() - train,
        config.output_dir.join("manifest.jsonl").display()
    );
    Ok(())
}

pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let m = manifest(config)?;
    let dataset = load_pairs(&m, Split::Train, load_options(config))?;
    if dataset.is_empty() {
        return Err(Error::Input("manifest has no training clips".into()));
    }
    let (mut trainer, start) = match resume {
        Some(path) => {
            let ck = ModelCheckpoint::load(path)?;
            let t = Trainer::resume(&ck, Some(&config.train))?;
            let s = t.global_step();
            (t, s)
        }
        None => (Trainer::new(&config.model, &config.train)?, 0),
    };
    let res = trainer.model_config().high_res;
    if dataset[0].target.height() != res || dataset[0].target.width() != res {
        return Err(Error::Shape(format!(
            "dataset frames are {}x{}, model expects {res}x{res}",
            dataset[0].target.height(),
            dataset[0].target.width()
        )));
    }
    let mut out = RunOutput::open(&config.output_dir, start)?;
    let reports = trainer.run(&dataset, Some(&mut out))?;
    match (reports.first(), reports.last()) {
        (Some(a), Some(b)) => println!(
            "steps {}..{} on {} samples, loss {:.5} -> {:.5}; checkpoint {}",
            a.step,
            b.step,
            dataset.len(),
            a.loss,
            b.loss,
            out.final_path().display()
        ),
        _ => println!("step budget already spent at step {start}; checkpoint {}", out.final_path().display()),
    }
    Ok(())
}

struct EnhanceJob {
    name: String,
    low: VideoClip,
    identity: ImageTensor,
}

fn enhance_jobs(config: &RunConfig) -> Result<Vec<EnhanceJob>> {
    if let Some(dir) = &config.infer.low_res_dir {
        let identity = require(&config.infer.identity_image, "infer.identity_image", "pass --identity")?;
        let mut low = load_clip(dir)?;
        if let Some(n) = config.data.standardize_frames {
            low = recdiff::data::standardize_clip(&low, n)?;
        }
        return Ok(vec![EnhanceJob {
            name: String::new(),
            low,
            identity: load_frame(identity)?,
        }]);
    }
    let m = manifest(config)?;
    m.split(config.infer.split)
        .map(|r| {
            let pair = load_clip_pair(&m, r, load_options(config))?;
            Ok(EnhanceJob {
                name: clip_name(&r.subject_id, &r.expression_label),
                low: pair.low,
                identity: pair.identity,
            })
        })
        .collect()
}

pub fn enhance(config: &RunConfig) -> Result<()> {
    let jobs = enhance_jobs(config)?;
    if jobs.is_empty() {
        return Err(Error::Input(format!("no {} clips in the manifest", config.infer.split)));
    }
    let enhancer = match config.infer.method {
        Method::Model => {
            let path = require(&config.infer.checkpoint, "infer.checkpoint", "pass --checkpoint")?;
            let ck = ModelCheckpoint::load(path)?;
            Some(Enhancer::from_checkpoint(&ck, config.infer.use_ema)?.with_stride(config.infer.stride)?)
        }
        Method::Upsample => None,
    };
    for job in &jobs {
        let out = match &enhancer {
            Some(e) => e.infer_video(&job.low, &job.identity, config.seed),
            None => upsample_clip(&job.low, job.identity.height()),
        }
        .inspect_err(|_| {
            if !job.name.is_empty() {
                eprintln!("failed on clip {}", job.name);
            }
        })?;
        let dir = if job.name.is_empty() {
            config.output_dir.join("frames")
        } else {
            config.output_dir.join("clips").join(&job.name)
        };
        save_clip(&dir, &out)?;
        println!("{} frames -> {}", out.frame_count(), dir.display());
    }
    Ok(())
}

pub fn embedders(config: &RunConfig) -> Result<(Box<dyn Embedder>, Box<dyn Embedder>)> {
    let m = &config.metrics;
    let video = RandomProjectionEmbedder::new(m.embedder_seed, m.embedder_grid, m.embedder_dim)?;
    let image: Box<dyn Embedder> = match m.image_embedder {
        ImageEmbedderKind::Pixel => Box::new(PixelEmbedder),
        ImageEmbedderKind::RandomProjection => Box::new(video.clone()),
    };
    Ok((image, Box::new(video)))
}

pub fn evaluate_cmd(config: &RunConfig) -> Result<()> {
    let generated_dir = require(&config.metrics.generated_dir, "metrics.generated_dir", "pass --generated")?;
    let mut owned: Vec<(String, VideoClip, VideoClip, ImageTensor)> = Vec::new();
    if has_frames(generated_dir)? {
        let reference = require(&config.metrics.reference_dir, "metrics.reference_dir", "pass --reference")?;
        let identity = require(&config.metrics.identity_image, "metrics.identity_image", "pass --identity")?;
        let name = generated_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        owned.push((name, load_clip(generated_dir)?, load_clip(reference)?, load_frame(identity)?));
    } else {
        let m = manifest(config)?;
        for r in m.split(config.metrics.split) {
            let name = clip_name(&r.subject_id, &r.expression_label);
            let pair = load_clip_pair(&m, r, load_options(config))?;
            let generated = load_clip(&generated_dir.join(&name))?;
            owned.push((name, generated, pair.high, pair.identity));
        }
    }
    let items: Vec<EvalItem<'_>> = owned
        .iter()
        .map(|(name, g, r, i)| EvalItem {
            name: name.clone(),
            generated: g,
            reference: r,
            identity: i,
        })
        .collect();
    let label = config.metrics.label.clone().unwrap_or_else(|| {
        generated_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "generated".into())
    });
    let (image, video) = embedders(config)?;
    let report = evaluate(&label, &items, image.as_ref(), video.as_ref())?;
    let path = config.output_dir.join(REPORT_NAME);
    report.save(&path)?;
    print!("{}", comparison_table(std::slice::from_ref(&report)));
    println!("report -> {}", path.display());
    Ok(())
}

pub fn report(config: &RunConfig) -> Result<()> {
    if config.report.reports.is_empty() && config.report.grid_clips.is_empty() {
        return Err(Error::config("report", "no report files or grid clips given"));
    }
    if !config.report.reports.is_empty() {
        let reports = config
            .report
            .reports
            .iter()
            .map(|p| MetricsReport::load(p))
            .collect::<Result<Vec<_>>>()?;
        let table = comparison_table(&reports);
        let path = config.output_dir.join(TABLE_NAME);
        fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
        print!("{table}");
    }
    if !config.report.grid_clips.is_empty() {
        let clips = config
            .report
            .grid_clips
            .iter()
            .map(|d| load_clip(d))
            .collect::<Result<Vec<_>>>()?;
        let grid = frame_grid(&clips, config.report.grid_cols)?;
        let path: PathBuf = config.output_dir.join(GRID_NAME);
        save_frame(&path, &grid)?;
        println!("grid {}x{} -> {}", grid.width(), grid.height(), path.display());
    }
    Ok(())
}
